"""Multi-block feature pyramids: a tiny frozen CNN and a file-replay path.

Blocks are numbered from 2 upward (the finest block is 2). The tiny
backbone is deterministic given its config seed and is never trained, so
its forward pass is plain numpy with no gradient tape.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ShapeError
from .params import ParamSet, fan_in_uniform, zeros
from .serialization import atomic_write_bytes, read_tensor_record, write_tensor_record
from .tensor import Tensor, conv2d_raw

PYRAMID_MAGIC = b"MSHP"
_VERSION = 1


@dataclass
class PyramidBlock:
    block_id: int
    layers: list[Tensor]  # each (d_l, h_b, w_b)

    @property
    def spatial(self) -> tuple[int, int]:
        return self.layers[0].shape[1:]

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return tuple(t.shape[0] for t in self.layers)


@dataclass
class FeaturePyramid:
    """Per-block, per-layer feature maps for one image, coarse blocks last."""
    blocks: list[PyramidBlock]

    def __post_init__(self):
        for blk in self.blocks:
            sizes = {t.shape[1:] for t in blk.layers}
            if len(sizes) != 1:
                raise ShapeError(f"block {blk.block_id} layers disagree on spatial size: {sizes}")
        prev = None
        for blk in self.blocks:
            if prev is not None and not (blk.spatial[0] < prev[0] and blk.spatial[1] < prev[1]):
                raise DataError(
                    f"block {blk.block_id} spatial size {blk.spatial} does not strictly "
                    f"decrease from {prev}")
            prev = blk.spatial

    @property
    def block_ids(self) -> list[int]:
        return [b.block_id for b in self.blocks]


@dataclass
class MaskPyramid:
    """The support mask resampled to each block's resolution, kept binary."""
    masks: dict[int, Tensor]  # block_id -> (1, h_b, w_b)


@dataclass(frozen=True)
class TinyBackboneConfig:
    """Stand-in extractor: stem + stride-2 blocks of conv3x3/relu stacks."""
    input_hw: tuple[int, int] = (64, 64)
    block_channels: tuple[int, ...] = (16, 32, 64)
    block_layers: tuple[int, ...] = (2, 2, 2)
    stem_channels: int = 8
    stem_halvings: int = 1
    seed: int = 0

    def __post_init__(self):
        if len(self.block_channels) != len(self.block_layers):
            raise ShapeError("block_channels and block_layers must have equal length")
        if any(l < 1 for l in self.block_layers):
            raise ShapeError("every block needs at least one layer")
        div = 2 ** (len(self.block_channels) + self.stem_halvings)
        h, w = self.input_hw
        if h % div or w % div:
            raise ShapeError(f"input size {self.input_hw} must be divisible by {div}")

    @property
    def block_ids(self) -> tuple[int, ...]:
        return tuple(range(2, 2 + len(self.block_channels)))

    @property
    def layer_dims(self) -> tuple[tuple[int, ...], ...]:
        return tuple((c,) * l for c, l in zip(self.block_channels, self.block_layers))


def block_spatial_sizes(h: int, w: int, stem_halvings: int, n_blocks: int) -> list[tuple[int, int]]:
    """Spatial extents per block under repeated ceil-halving.

    Blocks sit at stem_halvings + 1, +2, ... halvings of the input, which
    reproduces both the tiny default (64 -> 16/8/4 at one stem halving)
    and the 473 -> 60/30/15 chain at two.
    """
    sizes = []
    for _ in range(stem_halvings):
        h, w = -(-h // 2), -(-w // 2)
    for _ in range(n_blocks):
        h, w = -(-h // 2), -(-w // 2)
        sizes.append((h, w))
    return sizes


def init_backbone_params(config: TinyBackboneConfig) -> ParamSet:
    """Frozen random weights; never registered with any optimizer."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xB0]))
    params = ParamSet()
    in_ch = 3
    for i in range(config.stem_halvings):
        params.add(f"backbone.stem{i}.w",
                   fan_in_uniform(rng, (config.stem_channels, in_ch, 3, 3), in_ch * 9))
        params.add(f"backbone.stem{i}.b", zeros((config.stem_channels,)))
        in_ch = config.stem_channels
    for bid, (ch, n_layers) in zip(config.block_ids,
                                   zip(config.block_channels, config.block_layers)):
        for j in range(n_layers):
            params.add(f"backbone.b{bid}.l{j}.w", fan_in_uniform(rng, (ch, in_ch, 3, 3), in_ch * 9))
            params.add(f"backbone.b{bid}.l{j}.b", zeros((ch,)))
            in_ch = ch
    for t in params._params.values():
        t.requires_grad = False
    return params


def extract_pyramid(image: Tensor, config: TinyBackboneConfig, params: ParamSet) -> FeaturePyramid:
    """Run the frozen tiny CNN; taps every conv of every block as a layer."""
    if image.shape != (3, *config.input_hw):
        raise ShapeError(f"image shape {image.shape} != (3, {config.input_hw[0]}, {config.input_hw[1]})")
    x = image.data.astype(np.float64, copy=False)
    for i in range(config.stem_halvings):
        x = np.maximum(conv2d_raw(x, params[f"backbone.stem{i}.w"].data,
                                  params[f"backbone.stem{i}.b"].data, stride=2), 0.0)
    blocks = []
    for bid, n_layers in zip(config.block_ids, config.block_layers):
        layers = []
        for j in range(n_layers):
            stride = 2 if j == 0 else 1
            x = np.maximum(conv2d_raw(x, params[f"backbone.b{bid}.l{j}.w"].data,
                                      params[f"backbone.b{bid}.l{j}.b"].data, stride=stride), 0.0)
            layers.append(Tensor(x.astype(np.float32)))
        blocks.append(PyramidBlock(bid, layers))
    return FeaturePyramid(blocks)


def downsample_mask(mask: Tensor, pyramid: FeaturePyramid) -> MaskPyramid:
    """Nearest-neighbor resampling to every block resolution; stays binary."""
    m = mask.data
    if m.ndim == 3:
        m = m[0]
    if not np.all((m == 0) | (m == 1)):
        raise DataError("mask must be binary")
    h, w = m.shape
    out = {}
    for blk in pyramid.blocks:
        hb, wb = blk.spatial
        ys = np.minimum((np.arange(hb) + 0.5) * (h / hb), h - 1).astype(np.intp)
        xs = np.minimum((np.arange(wb) + 0.5) * (w / wb), w - 1).astype(np.intp)
        out[blk.block_id] = Tensor(m[np.ix_(ys, xs)][None].astype(np.float32))
    return MaskPyramid(out)


def save_pyramid(path: str | Path, pyramid: FeaturePyramid) -> None:
    buf = io.BytesIO()
    buf.write(PYRAMID_MAGIC)
    buf.write(struct.pack("<BB", _VERSION, len(pyramid.blocks)))
    for blk in pyramid.blocks:
        buf.write(struct.pack("<B", len(blk.layers)))
        for layer in blk.layers:
            write_tensor_record(buf, layer)
    atomic_write_bytes(path, buf.getvalue())


def load_pyramid(path: str | Path) -> FeaturePyramid:
    """Bit-exact reload; validates the strictly-decreasing block invariant."""
    with open(path, "rb") as fh:
        head = fh.read(6)
        if len(head) < 6 or head[:4] != PYRAMID_MAGIC:
            raise FormatError(f"bad pyramid magic: {head[:4]!r}")
        if head[4] != _VERSION:
            raise FormatError(f"unsupported pyramid version {head[4]}")
        n_blocks = head[5]
        blocks = []
        for i in range(n_blocks):
            nl_raw = fh.read(1)
            if len(nl_raw) < 1:
                raise FormatError("truncated pyramid block header")
            layers = [read_tensor_record(fh) for _ in range(nl_raw[0])]
            if not layers:
                raise FormatError(f"pyramid block {2 + i} has no layers")
            blocks.append(PyramidBlock(2 + i, layers))
    return FeaturePyramid(blocks)
