"""Support-to-query similarity: prototype-based and cosine-based maps.

Both similarities emit one single-channel map per (block, layer). The
prototype similarity is trained (one linear head per block/layer); the
cosine map has no parameters and never changes for fixed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError, UsageError
from .tensor import Tensor, concat, conv2d, linear, narrow, reshape, sigmoid

ZERO_NORM_EPS = 1e-12


@dataclass
class MaskedFeatureSet:
    """Feature vectors at mask-positive positions, in row-major scan order."""
    vectors: np.ndarray  # (n, d); n may be 0

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class GpsHead:
    """Bias-free linear head over [prototype || query vector], one per (block, layer)."""
    weight: Tensor  # (1, 2d)

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[1] // 2


@dataclass
class SimilarityMap:
    """One-channel similarity values for a block layer.

    Prototype-similarity ("gps") values must lie strictly inside (0, 1);
    cosine values lie in [0, 1]. Both ranges are asserted on construction.
    """
    values: Tensor  # (1, h, w)
    kind: str  # "gps" | "cosine"
    degenerate: bool = False

    def __post_init__(self):
        v = self.values.data
        if self.kind == "gps":
            if not (np.all(v > 0.0) and np.all(v < 1.0)):
                raise NumericalError("gps similarity left the open interval (0, 1)")
        elif self.kind == "cosine":
            if not (np.all(v >= 0.0) and np.all(v <= 1.0)):
                raise NumericalError("cosine similarity left [0, 1]")
        else:
            raise UsageError(f"unknown similarity kind: {self.kind!r}")


def masked_select(feature: Tensor, mask: Tensor) -> MaskedFeatureSet:
    """Select feature vectors where the binary mask is 1."""
    m = mask.data
    if m.ndim == 3:
        m = m[0]
    if m.shape != feature.shape[1:]:
        raise ShapeError(f"mask spatial shape {m.shape} != feature spatial shape {feature.shape[1:]}")
    chosen = feature.data.transpose(1, 2, 0)[m == 1]
    return MaskedFeatureSet(np.ascontiguousarray(chosen))


def prototype(selected: MaskedFeatureSet) -> Tensor:
    """Mean of the selected vectors; the zero vector for an empty selection.

    Accumulates sequentially in float64 so the result matches a plain
    running-sum oracle bit for bit.
    """
    d = selected.dim
    if selected.count == 0:
        return Tensor(np.zeros(d, dtype=selected.vectors.dtype))
    acc = np.zeros(d, dtype=np.float64)
    for row in selected.vectors:
        acc += row
    return Tensor((acc / selected.count).astype(selected.vectors.dtype))


def gps(proto: Tensor, query: Tensor, head: GpsHead) -> SimilarityMap:
    """Prototype similarity: sigmoid of a linear map over [prototype || query].

    The prototype half of the weight contributes a constant per-map bias,
    so the map is evaluated as a 1x1 convolution of the query with the
    query half plus that bias. Differentiable w.r.t. the head weight, the
    query features, and the prototype.
    """
    d = query.shape[0]
    if proto.shape != (d,):
        raise ShapeError(f"prototype shape {proto.shape} != ({d},)")
    if head.weight.shape != (1, 2 * d):
        raise ShapeError(f"head weight shape {head.weight.shape} != (1, {2 * d})")
    w_proto = narrow(head.weight, 1, 0, d)
    w_query = narrow(head.weight, 1, d, d)
    bias = linear(proto, w_proto)  # (1,)
    kernel = reshape(w_query, (1, d, 1, 1))
    logits = conv2d(query, kernel, bias)
    return SimilarityMap(sigmoid(logits), "gps")


def cosine_sim(query: Tensor, support: MaskedFeatureSet) -> SimilarityMap:
    """Mean ReLU-clamped cosine between each query vector and all support vectors.

    Vectors with norm below 1e-12 contribute a cosine of 0. An empty
    support set yields an all-zero map flagged as degenerate rather than
    an error. Carries no trainable parameters.
    """
    d, h, w = query.shape
    if support.count == 0:
        return SimilarityMap(Tensor(np.zeros((1, h, w), dtype=query.dtype)),
                             "cosine", degenerate=True)
    if support.dim != d:
        raise ShapeError(f"support vector dim {support.dim} != query channels {d}")
    s = support.vectors.astype(np.float64, copy=False)
    q = query.data.astype(np.float64, copy=False).reshape(d, h * w)
    s_norm = np.linalg.norm(s, axis=1, keepdims=True)
    q_norm = np.linalg.norm(q, axis=0, keepdims=True)
    s_unit = np.where(s_norm < ZERO_NORM_EPS, 0.0, s / np.maximum(s_norm, ZERO_NORM_EPS))
    q_unit = np.where(q_norm < ZERO_NORM_EPS, 0.0, q / np.maximum(q_norm, ZERO_NORM_EPS))
    cos = np.clip(s_unit @ q_unit, -1.0, 1.0)  # (n, h*w)
    vals = np.maximum(cos, 0.0).mean(axis=0).reshape(1, h, w)
    return SimilarityMap(Tensor(vals.astype(query.dtype)), "cosine")


def energy_map(maps: list[SimilarityMap]) -> Tensor:
    """Elementwise mean over all similarity maps of one block.

    Sequential float64 accumulation: the result equals a per-element
    running-mean oracle exactly.
    """
    if not maps:
        raise UsageError("energy_map needs at least one similarity map")
    shape = maps[0].values.shape
    for m in maps:
        if m.values.shape != shape:
            raise ShapeError(f"similarity map shapes differ: {m.values.shape} vs {shape}")
    acc = np.zeros(shape, dtype=np.float64)
    for m in maps:
        acc += m.values.data
    dtype = np.result_type(*(m.values.data.dtype for m in maps))
    return Tensor((acc / len(maps)).astype(dtype))
