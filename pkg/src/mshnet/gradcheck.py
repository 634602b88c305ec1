"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import UsageError
from .tensor import Tensor, relu_trace, weighted_sum

REL_ERROR_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    """Outcome of checking one input tensor of an operation."""
    param_id: str
    max_rel_error: float
    elements_checked: int

    def passes(self, tolerance: float = 1e-3) -> bool:
        return self.max_rel_error < tolerance


def grad_check(fn: Callable[[], Tensor], inputs: Mapping[str, Tensor],
               epsilon: float = 1e-3, rng: np.random.Generator | None = None,
               max_probes: int = 32, skip_kink_probes: bool = False) -> list[GradCheckReport]:
    """Compare backprop gradients of fn() against central differences.

    ``fn`` must rebuild its computation from the current values of the
    given input tensors on every call. The (possibly non-scalar) output is
    scalarized through a fixed random projection; each input tensor is
    probed at a random subsample of min(size, max_probes) elements. The
    relative error denominator is max(|analytic|, |numeric|, 1e-8).

    With ``skip_kink_probes``, probes whose +/-epsilon forwards disagree
    on any relu sign mask are discarded and re-drawn: a central difference
    across a relu kink does not estimate the subgradient, so composite
    networks are probed away from their kinks.
    """
    if not (1e-5 <= epsilon <= 1e-2):
        raise UsageError(f"epsilon must be in [1e-5, 1e-2], got {epsilon}")
    rng = rng or np.random.default_rng(0)

    for t in inputs.values():
        t.requires_grad = True
        t.grad = None

    out = fn()
    proj = rng.standard_normal(out.shape)

    def loss_and_masks() -> tuple[float, bytes | None]:
        if not skip_kink_probes:
            return float(weighted_sum(fn(), proj).data), None
        with relu_trace() as masks:
            value = float(weighted_sum(fn(), proj).data)
        return value, b"".join(masks)

    weighted_sum(out, proj).backward()

    reports = []
    for name, t in inputs.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        size = t.data.size
        n_probe = min(size, max_probes)
        candidates = rng.permutation(size)
        worst = 0.0
        checked = 0
        flat = t.data.reshape(-1)
        for i in candidates:
            if checked >= n_probe:
                break
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(flat[i])  # the perturbation actually stored
            lp, masks_p = loss_and_masks()
            flat[i] = orig - epsilon
            lo = float(flat[i])
            lm, masks_m = loss_and_masks()
            flat[i] = orig
            if skip_kink_probes and masks_p != masks_m:
                continue
            numeric = (lp - lm) / (hi - lo)
            a = float(analytic.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_ERROR_FLOOR)
            worst = max(worst, rel)
            checked += 1
        t.grad = None
        reports.append(GradCheckReport(name, worst, checked))
    return reports


def max_error(reports: list[GradCheckReport]) -> float:
    return max((r.max_rel_error for r in reports), default=0.0)
