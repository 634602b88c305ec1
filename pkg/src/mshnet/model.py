"""The merging network: per-block fusion of similarity stacks into a mask.

Each block runs a two-branch symmetric merging stage (one branch per
similarity kind), aggregates over support shots by averaging, and emits a
hyperrelation feature plus an intermediate segmentation head. The
per-block features are then fused coarse-to-fine and decoded into
two-channel logits at query resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import FeaturePyramid, MaskPyramid
from .errors import ConfigError, ShapeError, UsageError
from .params import ParamSet, add_conv, add_linear, fan_in_uniform
from .similarity import GpsHead, SimilarityMap, cosine_sim, gps, masked_select, prototype
from .tensor import (
    Tensor, add, bilinear_resize, channel_attention, concat, conv2d,
    cross_entropy, mean_stack, relu,
)

GPS_BRANCH = "gps"
COS_BRANCH = "cos"
SIM_MODES = ("both", "gps", "cosine")


@dataclass
class SimilarityStack:
    """Per-layer similarity maps for one (shot, block), stacked channelwise."""
    gps_layers: Tensor | None  # (L_b, h, w) or None when the branch is disabled
    cos_layers: Tensor | None
    shot: int
    block_id: int

    @property
    def spatial(self) -> tuple[int, int]:
        ref = self.gps_layers if self.gps_layers is not None else self.cos_layers
        return ref.shape[1:]


@dataclass
class HyperFeature:
    channels: Tensor  # (C_h, h_b, w_b)
    block_id: int


@dataclass
class SegLogits:
    """Two-channel (background, foreground) logits at query resolution."""
    logits: Tensor

    def __post_init__(self):
        if self.logits.data.ndim != 3 or self.logits.shape[0] != 2:
            raise ShapeError(f"segmentation logits must be (2,H,W), got {self.logits.shape}")


@dataclass
class LossReport:
    """Eq-style loss decomposition: total = mean(inner) + outer."""
    inner: list[float]
    outer: float
    total: float
    total_node: Tensor = field(repr=False)


@dataclass
class EpisodeOutput:
    final: SegLogits
    inner: list[SegLogits]
    block_maps: dict[int, list[SimilarityMap]]
    degenerate: bool


@dataclass(frozen=True)
class ModelConfig:
    """Shapes and switches for the merging network."""
    block_ids: tuple[int, ...]
    layer_dims: tuple[tuple[int, ...], ...]  # feature dim per (block, layer)
    hidden_channels: int = 64
    attention_ratio: int = 4
    atrous_rates: tuple[int, ...] = (1, 2, 4)
    similarity_mode: str = "both"

    def __post_init__(self):
        if self.similarity_mode not in SIM_MODES:
            raise ConfigError(f"similarity_mode must be one of {SIM_MODES}, "
                              f"got {self.similarity_mode!r}")
        if len(self.block_ids) != len(self.layer_dims):
            raise ConfigError("block_ids and layer_dims must have equal length")
        if self.hidden_channels % self.attention_ratio:
            raise ConfigError(
                f"hidden_channels {self.hidden_channels} not divisible by "
                f"attention ratio {self.attention_ratio}")

    @property
    def branches(self) -> tuple[str, ...]:
        if self.similarity_mode == "both":
            return (GPS_BRANCH, COS_BRANCH)
        return (GPS_BRANCH,) if self.similarity_mode == "gps" else (COS_BRANCH,)

    @property
    def uses_gps(self) -> bool:
        return GPS_BRANCH in self.branches

    @property
    def uses_cosine(self) -> bool:
        return COS_BRANCH in self.branches


def init_model_params(config: ModelConfig, seed: int) -> ParamSet:
    """All trainable weights: similarity heads, merging blocks, decode heads.

    Branches that the similarity mode disables are never instantiated, so
    the element count reflects the ablated architecture.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3E7]))
    params = ParamSet()
    ch = config.hidden_channels
    for bid, dims in zip(config.block_ids, config.layer_dims):
        n_layers = len(dims)
        if config.uses_gps:
            for l, d in enumerate(dims):
                params.add(f"gps.b{bid}.l{l}.w", fan_in_uniform(rng, (1, 2 * d), 2 * d))
        for branch in config.branches:
            add_conv(params, rng, f"smb.b{bid}.{branch}.block.conv1", ch, n_layers, 1, 1)
            add_conv(params, rng, f"smb.b{bid}.{branch}.block.conv2", ch, ch, 3, 3)
        if config.uses_gps:
            for rate in config.atrous_rates:
                add_conv(params, rng, f"smb.b{bid}.gps.shot.r{rate}", ch, ch, 3, 3)
        if config.uses_cosine:
            add_conv(params, rng, f"smb.b{bid}.cos.shot", ch, ch, 3, 3)
        add_conv(params, rng, f"smb.b{bid}.merge.conv", ch, len(config.branches) * ch, 3, 3)
        add_linear(params, rng, f"smb.b{bid}.merge.attn.fc1", ch // config.attention_ratio, ch)
        add_linear(params, rng, f"smb.b{bid}.merge.attn.fc2", ch, ch // config.attention_ratio)
        add_conv(params, rng, f"smb.b{bid}.head", 2, ch, 1, 1)
    for i in range(len(config.block_ids) - 1):
        add_conv(params, rng, f"pyramid.fuse{i}", ch, 2 * ch, 3, 3)
    add_conv(params, rng, "pyramid.head", 2, ch, 1, 1)
    return params


def _conv(params: ParamSet, name: str, x: Tensor, dilation: int = 1) -> Tensor:
    return conv2d(x, params[name + ".w"], params[name + ".b"], dilation=dilation)


def block_conv(stack: Tensor, branch: str, block_id: int, params: ParamSet) -> Tensor:
    """Integrate the per-layer stack: 1x1 conv -> relu -> 3x3 conv -> relu."""
    prefix = f"smb.b{block_id}.{branch}.block"
    expected = params[prefix + ".conv1.w"].shape[1]
    if stack.shape[0] != expected:
        raise ShapeError(f"stack has {stack.shape[0]} layers, block {block_id} "
                         f"{branch} branch expects {expected}")
    x = relu(_conv(params, prefix + ".conv1", stack))
    return relu(_conv(params, prefix + ".conv2", x))


def shot_conv(avg: Tensor, branch: str, block_id: int, params: ParamSet,
              atrous_rates: tuple[int, ...] = (1, 2, 4)) -> Tensor:
    """Refine the shot-averaged features.

    The prototype branch sums parallel dilated 3x3 convolutions; the
    cosine branch is a single 3x3 convolution. Both end in relu.
    """
    if branch == GPS_BRANCH:
        parts = [_conv(params, f"smb.b{block_id}.gps.shot.r{r}", avg, dilation=r)
                 for r in atrous_rates]
        out = parts[0]
        for p in parts[1:]:
            out = add(out, p)
        return relu(out)
    return relu(_conv(params, f"smb.b{block_id}.cos.shot", avg))


def merge_conv(branch_feats: list[Tensor], block_id: int, params: ParamSet) -> HyperFeature:
    """Fuse the branch features: concat -> 3x3 conv -> relu -> channel attention."""
    shapes = {f.shape for f in branch_feats}
    if len(shapes) != 1:
        raise ShapeError(f"branch features disagree on shape: {shapes}")
    x = branch_feats[0] if len(branch_feats) == 1 else concat(branch_feats, axis=0)
    x = relu(_conv(params, f"smb.b{block_id}.merge.conv", x))
    prefix = f"smb.b{block_id}.merge.attn"
    x = channel_attention(x, params[prefix + ".fc1.w"], params[prefix + ".fc1.b"],
                          params[prefix + ".fc2.w"], params[prefix + ".fc2.b"])
    return HyperFeature(x, block_id)


def smb_forward(stacks: list[SimilarityStack], block_id: int, params: ParamSet,
                config: ModelConfig, out_hw: tuple[int, int]) -> tuple[HyperFeature, SegLogits]:
    """One symmetric merging block over all K shots of one block.

    Per shot and branch: block_conv; then average over shots (bit-exact
    under shot permutation), shot_conv per branch, and merge_conv. The
    intermediate head decodes the hyperfeature to query-size logits.
    """
    if not stacks:
        raise UsageError("smb_forward needs at least one shot")
    if len({s.spatial for s in stacks}) != 1:
        raise ShapeError("support shots disagree on similarity map shape")
    branch_feats = []
    for branch in config.branches:
        per_shot = []
        for s in stacks:
            layers = s.gps_layers if branch == GPS_BRANCH else s.cos_layers
            if layers is None:
                raise UsageError(f"{branch} branch enabled but its stack is missing")
            per_shot.append(block_conv(layers, branch, block_id, params))
        avg = mean_stack(per_shot, canonical_order=True)
        branch_feats.append(shot_conv(avg, branch, block_id, params, config.atrous_rates))
    hyper = merge_conv(branch_feats, block_id, params)
    small = _conv(params, f"smb.b{block_id}.head", hyper.channels)
    inner = SegLogits(bilinear_resize(small, *out_hw))
    return hyper, inner


def pyramid_merge(hypers: list[HyperFeature], params: ParamSet,
                  out_hw: tuple[int, int]) -> SegLogits:
    """Fuse hyperfeatures coarse-to-fine, then decode and upsample.

    Each step upsamples the running feature to the next (finer) block,
    concatenates, and applies 3x3 conv + relu. A single block skips
    fusion entirely.
    """
    if not hypers:
        raise UsageError("pyramid_merge needs at least one hyperfeature")
    x = hypers[0].channels
    for i, hf in enumerate(hypers[1:]):
        up = bilinear_resize(x, *hf.channels.shape[1:])
        x = relu(_conv(params, f"pyramid.fuse{i}", concat([up, hf.channels], axis=0)))
    logits = _conv(params, "pyramid.head", x)
    return SegLogits(bilinear_resize(logits, *out_hw))


def combine_losses(inner_nodes: list[Tensor], outer_node: Tensor) -> LossReport:
    """mean(inner) + outer over scalar loss tensors."""
    if not inner_nodes:
        raise UsageError("the loss needs at least one intermediate component")
    total_node = add(mean_stack(inner_nodes), outer_node)
    return LossReport(inner=[n.item() for n in inner_nodes], outer=outer_node.item(),
                      total=total_node.item(), total_node=total_node)


def total_loss(inner: list[SegLogits], final: SegLogits,
               target: np.ndarray | Tensor) -> LossReport:
    """Total objective: mean of the intermediate losses plus the final loss."""
    if not inner:
        raise UsageError("total_loss needs at least one intermediate output")
    return combine_losses([cross_entropy(s.logits, target) for s in inner],
                          cross_entropy(final.logits, target))


def predict_mask(seg: SegLogits) -> np.ndarray:
    """Per-pixel argmax over the two channels; ties resolve to background."""
    return (seg.logits.data[1] > seg.logits.data[0]).astype(np.uint8)


class MultiSimilarityNet:
    """Episode-level forward pass wiring similarities into the merge network."""

    def __init__(self, config: ModelConfig, params: ParamSet):
        self.config = config
        self.params = params

    def gps_head(self, block_id: int, layer: int) -> GpsHead:
        return GpsHead(self.params[f"gps.b{block_id}.l{layer}.w"])

    def forward_episode(self, support: list[tuple[FeaturePyramid, MaskPyramid]],
                        query: FeaturePyramid, out_hw: tuple[int, int]) -> EpisodeOutput:
        """K-shot forward: similarity stacks per shot/block, SMBs, pyramid merge."""
        if not support:
            raise UsageError("an episode needs at least one support shot")
        cfg = self.config
        if tuple(query.block_ids) != cfg.block_ids:
            raise ShapeError(f"query pyramid blocks {query.block_ids} != model blocks {cfg.block_ids}")
        hypers_fine_first: list[HyperFeature] = []
        inner: list[SegLogits] = []
        block_maps: dict[int, list[SimilarityMap]] = {}
        degenerate = False
        for bi, qblock in enumerate(query.blocks):
            bid = qblock.block_id
            maps_here: list[SimilarityMap] = []
            stacks = []
            for k, (spyr, smasks) in enumerate(support):
                sblock = spyr.blocks[bi]
                if sblock.block_id != bid or sblock.layer_dims != qblock.layer_dims:
                    raise ShapeError(f"support shot {k} block {bid} does not match the query pyramid")
                mask = smasks.masks[bid]
                gps_maps, cos_maps = [], []
                for l, (sfeat, qfeat) in enumerate(zip(sblock.layers, qblock.layers)):
                    selected = masked_select(sfeat, mask)
                    if cfg.uses_gps:
                        gps_maps.append(gps(prototype(selected), qfeat, self.gps_head(bid, l)))
                    if cfg.uses_cosine:
                        cmap = cosine_sim(qfeat, selected)
                        degenerate = degenerate or cmap.degenerate
                        cos_maps.append(cmap)
                maps_here.extend(gps_maps)
                maps_here.extend(cos_maps)
                stacks.append(SimilarityStack(
                    gps_layers=concat([m.values for m in gps_maps], 0) if gps_maps else None,
                    cos_layers=concat([m.values for m in cos_maps], 0) if cos_maps else None,
                    shot=k, block_id=bid))
            block_maps[bid] = maps_here
            hyper, inner_logits = smb_forward(stacks, bid, self.params, cfg, out_hw)
            hypers_fine_first.append(hyper)
            inner.append(inner_logits)
        final = pyramid_merge(hypers_fine_first[::-1], self.params, out_hw)
        return EpisodeOutput(final=final, inner=inner, block_maps=block_maps,
                             degenerate=degenerate)
