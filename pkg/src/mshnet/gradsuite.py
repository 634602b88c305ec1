"""The standard gradient verification suite over the whole op set.

Per-op checks run in float64 with fresh random inputs per seed; the
end-to-end check probes every trainable parameter group of a tiny
two-block episode (coarsest block 4x4). Composite-network probes skip
finite differences that cross a relu kink, per the checking contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid, MaskPyramid, PyramidBlock
from .gradcheck import GradCheckReport, grad_check
from .model import ModelConfig, MultiSimilarityNet, init_model_params, total_loss
from .similarity import GpsHead, gps
from .tensor import Tensor


@dataclass
class SuiteEntry:
    check: str
    report: GradCheckReport

    @property
    def ok(self) -> bool:
        return self.report.passes(1e-3)


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def _t(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape))


def _check(entries, name, fn, inputs, rng, **kw):
    for report in grad_check(fn, inputs, rng=rng, **kw):
        entries.append(SuiteEntry(f"{name}:{report.param_id}", report))


def _conv_case(entries, seed, dilation):
    rng = _rng(seed, 10 + dilation)
    x, k, b = _t(rng, (2, 6, 6)), _t(rng, (3, 2, 3, 3)), _t(rng, (3,))
    _check(entries, f"conv2d[d={dilation}]",
           lambda: T.conv2d(x, k, b, dilation=dilation),
           {"input": x, "kernel": k, "bias": b}, rng)


def _bilinear_case(entries, seed):
    rng = _rng(seed, 20)
    x = _t(rng, (2, 4, 5))
    _check(entries, "bilinear_resize", lambda: T.bilinear_resize(x, 7, 3),
           {"input": x}, rng)


def _activation_cases(entries, seed):
    rng = _rng(seed, 30)
    sign = rng.choice([-1.0, 1.0], size=(3, 4, 4))
    x_relu = Tensor(sign * rng.uniform(0.1, 1.0, size=(3, 4, 4)))  # away from the kink
    _check(entries, "relu", lambda: T.relu(x_relu), {"input": x_relu}, rng)
    x_sig = _t(rng, (3, 4, 4), -3, 3)
    _check(entries, "sigmoid", lambda: T.sigmoid(x_sig), {"input": x_sig}, rng)


def _attention_case(entries, seed):
    rng = _rng(seed, 40)
    x = _t(rng, (8, 4, 4))
    w1, b1 = _t(rng, (2, 8)), _t(rng, (2,))
    w2, b2 = _t(rng, (8, 2)), _t(rng, (8,))
    _check(entries, "channel_attention",
           lambda: T.channel_attention(x, w1, b1, w2, b2),
           {"input": x, "w_reduce": w1, "b_reduce": b1,
            "w_restore": w2, "b_restore": b2}, rng)


def _cross_entropy_case(entries, seed):
    rng = _rng(seed, 50)
    logits = _t(rng, (2, 4, 4), -2, 2)
    target = rng.integers(0, 2, size=(4, 4))
    _check(entries, "cross_entropy", lambda: T.cross_entropy(logits, target),
           {"logits": logits}, rng)


def _gps_case(entries, seed):
    rng = _rng(seed, 60)
    d = 4
    w, proto, query = _t(rng, (1, 2 * d)), _t(rng, (d,)), _t(rng, (d, 3, 3))
    _check(entries, "gps_head", lambda: gps(proto, query, GpsHead(w)).values,
           {"weight": w, "prototype": proto, "query": query}, rng)


def _episode_case(entries, seed):
    rng = _rng(seed, 70)
    sizes = ((8, 8), (4, 4))
    dims = ((3,), (3,))

    def pyramid():
        blocks = []
        for i, (layer_dims, hw) in enumerate(zip(dims, sizes)):
            layers = [Tensor(rng.standard_normal((d, *hw))) for d in layer_dims]
            blocks.append(PyramidBlock(2 + i, layers))
        return FeaturePyramid(blocks)

    def mask_pyramid():
        masks = {}
        for i, hw in enumerate(sizes):
            m = (rng.uniform(size=(1, *hw)) > 0.4).astype(np.float64)
            m.reshape(-1)[0] = 1.0
            masks[2 + i] = Tensor(m)
        return MaskPyramid(masks)

    cfg = ModelConfig(block_ids=(2, 3), layer_dims=dims, hidden_channels=4,
                      similarity_mode="both")
    params = init_model_params(cfg, seed=seed)
    for _, t in params.items():
        t.data = t.data.astype(np.float64)
    net = MultiSimilarityNet(cfg, params)
    support = [(pyramid(), mask_pyramid())]
    query = pyramid()
    target = (rng.uniform(size=(8, 8)) > 0.5).astype(np.float64)

    def fn():
        out = net.forward_episode(support, query, (8, 8))
        return total_loss(out.inner, out.final, target).total_node

    _check(entries, "tiny_episode", fn, dict(params.items()), rng,
           skip_kink_probes=True)


def run_gradient_suite(op_seeds: int = 100, episode_seeds: int = 3,
                       seed_base: int = 0) -> list[SuiteEntry]:
    """Every check at epsilon 1e-3; pass threshold is 1e-3 relative."""
    entries: list[SuiteEntry] = []
    for s in range(op_seeds):
        seed = seed_base + s
        for dilation in (1, 2, 4):
            _conv_case(entries, seed, dilation)
        _bilinear_case(entries, seed)
        _activation_cases(entries, seed)
        _attention_case(entries, seed)
        _cross_entropy_case(entries, seed)
        _gps_case(entries, seed)
    for s in range(episode_seeds):
        _episode_case(entries, seed_base + s)
    return entries


def suite_passed(entries: list[SuiteEntry]) -> bool:
    return all(e.ok for e in entries)


def format_suite_table(entries: list[SuiteEntry]) -> str:
    """One line per failed check plus a per-check-group summary."""
    groups: dict[str, tuple[float, int]] = {}
    for e in entries:
        name = e.check.split(":")[0]
        worst, count = groups.get(name, (0.0, 0))
        groups[name] = (max(worst, e.report.max_rel_error), count + e.report.elements_checked)
    lines = [f"{'check':<20} {'max rel error':>14} {'elements':>9}  status"]
    for name, (worst, count) in groups.items():
        status = "pass" if worst < 1e-3 else "FAIL"
        lines.append(f"{name:<20} {worst:>14.3e} {count:>9}  {status}")
    return "\n".join(lines)
