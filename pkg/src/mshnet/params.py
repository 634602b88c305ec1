"""Named parameter sets, SGD with momentum, and the learning-rate schedule."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .errors import StateError, UsageError
from .tensor import Tensor


class ParamSet:
    """Ordered map of unique parameter names to trainable tensors.

    Gradients live on the tensors themselves (accumulated by backward
    passes, cleared by the optimizer); one momentum buffer per parameter
    is kept here.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._momentum: dict[str, np.ndarray] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise UsageError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._momentum[name] = np.zeros_like(tensor.data)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def momentum(self, name: str) -> np.ndarray:
        return self._momentum[name]

    def element_count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_hash(self) -> str:
        """Hex digest over all parameter and momentum bytes (order-sensitive)."""
        import hashlib
        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
            h.update(self._momentum[name].tobytes())
        return h.hexdigest()


def sgd_step(params: ParamSet, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> ParamSet:
    """One SGD update: v = momentum*v + grad + wd*param; param -= lr*v.

    Gradients must be populated for every parameter; they are cleared
    after the step.
    """
    missing = [n for n, t in params.items() if t.grad is None]
    if missing:
        raise StateError(f"no accumulated gradient for parameter(s): {', '.join(missing)}")
    for name, t in params.items():
        v = params.momentum(name)
        g = t.grad
        if weight_decay != 0.0:
            g = g + weight_decay * t.data
        v *= momentum
        v += g
        t.data -= lr * v
        t.grad = None
    return params


def exp_lr_decay(initial_lr: float, gamma: float, step: int) -> float:
    """Exponentially decayed rate initial_lr * gamma**step."""
    if not (0.0 < gamma <= 1.0):
        raise UsageError(f"gamma must be in (0, 1], got {gamma}")
    if step < 0:
        raise UsageError(f"step must be >= 0, got {step}")
    return initial_lr * gamma ** step


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, dtype=np.float32) -> Tensor:
    """Kaiming-style uniform init with bound sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


def zeros(shape: tuple[int, ...], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def add_conv(params: ParamSet, rng: np.random.Generator, name: str,
             out_ch: int, in_ch: int, kh: int, kw: int, dtype=np.float32) -> None:
    """Register a conv kernel + zero bias pair under name.w / name.b."""
    params.add(name + ".w", fan_in_uniform(rng, (out_ch, in_ch, kh, kw), in_ch * kh * kw, dtype))
    params.add(name + ".b", zeros((out_ch,), dtype))


def add_linear(params: ParamSet, rng: np.random.Generator, name: str,
               out_dim: int, in_dim: int, dtype=np.float32) -> None:
    params.add(name + ".w", fan_in_uniform(rng, (out_dim, in_dim), in_dim, dtype))
    params.add(name + ".b", zeros((out_dim,), dtype))
