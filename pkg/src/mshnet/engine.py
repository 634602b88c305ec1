"""Training and evaluation loops plus report emission.

A Pipeline bundles the feature source (tiny backbone or pyramid-file
replay) with the merging network so episodes can be run end to end from
a dataset index entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import (
    FeaturePyramid, TinyBackboneConfig, downsample_mask, extract_pyramid,
    init_backbone_params, load_pyramid,
)
from .config import RunConfig
from .data import (
    DatasetIndex, Episode, FoldSpec, ImageEntry, build_folds,
    filter_train_images, read_index, sample_episode,
)
from .errors import ConfigError, DataError, NumericalError
from .metrics import EvalResult, fb_iou, miou
from .model import (
    EpisodeOutput, ModelConfig, MultiSimilarityNet, init_model_params,
    predict_mask, total_loss,
)
from .params import ParamSet, exp_lr_decay, sgd_step
from .serialization import atomic_write_text, load_tensor, save_checkpoint
from .synth import make_synthetic_index, synthetic_loader
from .tensor import Tensor


def rng_for(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


@dataclass
class Pipeline:
    config: RunConfig
    model_config: ModelConfig
    model_params: ParamSet
    backbone_config: TinyBackboneConfig | None
    backbone_params: ParamSet | None
    loader: object  # (ImageEntry, class_id) -> (payload, mask)

    def network(self) -> MultiSimilarityNet:
        return MultiSimilarityNet(self.model_config, self.model_params)


def replay_loader(features_dir: str | Path):
    """Loads per-image pyramid and label-map files written by save_pyramid.

    Expects <dir>/<image_id>.mshp plus <dir>/<image_id>.labels.msht where
    the label map stores class_id + 1 per pixel (0 = background).
    """
    root = Path(features_dir)

    def load(entry: ImageEntry, class_id: int):
        pyr_path = root / f"{entry.image_id}.mshp"
        lab_path = root / f"{entry.image_id}.labels.msht"
        if not pyr_path.exists() or not lab_path.exists():
            raise DataError(f"no replay files for image {entry.image_id} under {root}")
        pyramid = load_pyramid(pyr_path)
        labels = load_tensor(lab_path)
        mask = (labels.data == class_id + 1).astype(np.float32)
        if mask.ndim == 2:
            mask = mask[None]
        return pyramid, Tensor(mask)

    return load


def tiny_image_loader(entry: ImageEntry, class_id: int):
    if not entry.source.startswith("SYNTH:"):
        raise DataError(
            f"image {entry.image_id}: the tiny backbone only consumes synthetic "
            f"sources or replayed feature files, got {entry.source!r}")
    return synthetic_loader(entry, class_id)


def build_index(config: RunConfig) -> DatasetIndex:
    if config.index is not None:
        return read_index(config.index)
    return make_synthetic_index(config.synth_classes, config.synth_images_per_class,
                                config.image_size, config.seed)


def build_split(config: RunConfig, index: DatasetIndex) -> FoldSpec:
    """Fold holdout per the cross-validation scheme, or no holdout at all."""
    if config.holdout == "none":
        if config.eval_on != "train":
            raise ConfigError("holdout 'none' keeps no test classes; set eval_on to 'train'")
        return FoldSpec(config.fold, config.scheme, frozenset(),
                        frozenset(range(index.num_classes)))
    return build_folds(index.num_classes, config.fold, config.scheme)


def build_pipeline(config: RunConfig, params: ParamSet | None = None) -> Pipeline:
    if config.backbone == "tiny":
        bcfg = TinyBackboneConfig(
            input_hw=(config.image_size, config.image_size),
            block_channels=config.backbone_channels,
            block_layers=config.backbone_layers,
            stem_channels=config.stem_channels,
            seed=config.seed,
        )
        block_ids, layer_dims = bcfg.block_ids, bcfg.layer_dims
        bparams = init_backbone_params(bcfg)
        loader = tiny_image_loader
    else:
        root = Path(config.features)
        sample = sorted(root.glob("*.mshp"))
        if not sample:
            raise DataError(f"no .mshp pyramid files under {root}")
        peek = load_pyramid(sample[0])
        block_ids = tuple(peek.block_ids)
        layer_dims = tuple(blk.layer_dims for blk in peek.blocks)
        bcfg = None
        bparams = None
        loader = replay_loader(root)
    mcfg = ModelConfig(
        block_ids=block_ids,
        layer_dims=layer_dims,
        hidden_channels=config.hidden_channels,
        attention_ratio=config.attention_ratio,
        atrous_rates=config.atrous_rates,
        similarity_mode=config.sim,
    )
    return Pipeline(config, mcfg, params or init_model_params(mcfg, config.seed),
                    bcfg, bparams, loader)


def episode_forward(pipeline: Pipeline, episode: Episode) -> tuple[EpisodeOutput, np.ndarray]:
    """Run one episode through feature extraction and the merging network."""

    def to_pyramid(payload):
        if isinstance(payload, FeaturePyramid):
            return payload
        return extract_pyramid(payload, pipeline.backbone_config, pipeline.backbone_params)

    support = []
    for s in episode.support:
        pyr = to_pyramid(s.payload)
        support.append((pyr, downsample_mask(s.mask, pyr)))
    query_pyr = to_pyramid(episode.query.payload)
    target = episode.query.mask.data[0]
    out = pipeline.network().forward_episode(support, query_pyr, target.shape)
    return out, target


@dataclass
class StepStats:
    step: int
    lr: float
    total: float
    inner_mean: float
    outer: float


@dataclass
class TrainResult:
    pipeline: Pipeline
    history: list[StepStats]
    index: DatasetIndex
    spec: FoldSpec


def run_training(config: RunConfig, index: DatasetIndex | None = None,
                 spec: FoldSpec | None = None) -> TrainResult:
    """Episodic SGD over train classes; aborts on a non-finite loss.

    Gradients are summed over the batch_size episodes of each step; the
    learning rate decays exponentially per epoch (steps_per_epoch steps).
    Writes a checkpoint at the configured cadence plus a final one when a
    checkpoint path is set, atomically.
    """
    index = index if index is not None else build_index(config)
    spec = spec if spec is not None else build_split(config, index)
    if spec.test_classes:
        index = filter_train_images(index, spec, config.cap, config.seed)
    if not spec.train_classes:
        raise DataError("no train classes left")
    pipeline = build_pipeline(config)
    rng = rng_for(config.seed, 0x7121)
    history: list[StepStats] = []
    for step in range(config.steps):
        lr = exp_lr_decay(config.lr, config.gamma, step // config.steps_per_epoch)
        totals, inner_means, outers = [], [], []
        for _ in range(config.batch_size):
            episode = sample_episode(index, spec, config.k, rng, pipeline.loader, "train")
            out, target = episode_forward(pipeline, episode)
            report = total_loss(out.inner, out.final, target)
            if not math.isfinite(report.total):
                raise NumericalError(f"training loss diverged at step {step}")
            report.total_node.backward()
            totals.append(report.total)
            inner_means.append(float(np.mean(report.inner)))
            outers.append(report.outer)
        if config.batch_size > 1:  # summed episode gradients -> batch mean
            for _, t in pipeline.model_params.items():
                t.grad /= config.batch_size
        sgd_step(pipeline.model_params, lr, config.momentum, config.weight_decay)
        history.append(StepStats(step, lr, float(np.mean(totals)),
                                 float(np.mean(inner_means)), float(np.mean(outers))))
        if (config.checkpoint and config.checkpoint_every
                and (step + 1) % config.checkpoint_every == 0):
            save_checkpoint(config.checkpoint, pipeline.model_params)
    if config.checkpoint:
        save_checkpoint(config.checkpoint, pipeline.model_params)
    return TrainResult(pipeline, history, index, spec)


def run_evaluation(pipeline: Pipeline, index: DatasetIndex, spec: FoldSpec,
                   k: int, episodes: int, seed: int, split: str = "test") -> EvalResult:
    """Fixed-parameter episodic evaluation with pooled pixel counts."""
    if episodes < 1:
        raise DataError(f"episodes must be >= 1, got {episodes}")
    rng = rng_for(seed, 0xE7A1)
    result = EvalResult()
    for _ in range(episodes):
        episode = sample_episode(index, spec, k, rng, pipeline.loader, split)
        out, target = episode_forward(pipeline, episode)
        result.update(episode.class_id, predict_mask(out.final), target)
        if out.degenerate:
            result.degenerate_episodes += 1
    return result


def _header_lines(config: RunConfig) -> list[str]:
    return [f"# config = {config.to_json()}", f"# seed = {config.seed}"]


def write_eval_report(path: str | Path, config: RunConfig, result: EvalResult,
                      fold: int) -> None:
    """CSV with per-class pooled counts plus mIoU and FB-IoU summary rows."""
    lines = _header_lines(config)
    lines.append("fold,class,tp,fp,fn,iou")
    per_class = result.per_class_iou()
    for cls in sorted(result.class_counts):
        tp, fp, fn = result.class_counts[cls]
        iou = per_class[cls]
        iou_str = f"{iou:.6f}" if iou is not None else "undefined"
        lines.append(f"{fold},{cls},{tp},{fp},{fn},{iou_str}")
    lines.append(f"{fold},mIoU,,,,{miou(result):.6f}")
    lines.append(f"{fold},FB-IoU,,,,{fb_iou(result):.6f}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_loss_log(path: str | Path, config: RunConfig, history: list[StepStats]) -> None:
    lines = _header_lines(config)
    lines.append("step,lr,total,inner_mean,outer")
    for s in history:
        lines.append(f"{s.step},{s.lr:.8f},{s.total:.8f},{s.inner_mean:.8f},{s.outer:.8f}")
    atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass
class AblationRow:
    sim_mode: str
    fold: int
    fold_miou: float
    mean_miou: float
    param_count: int


def write_ablation_report(path: str | Path, config: RunConfig,
                          rows: list[AblationRow], direction_ok: bool) -> None:
    lines = _header_lines(config)
    lines.append(f"# direction_ok = {direction_ok}")
    lines.append("sim_mode,fold,fold_miou,mean_miou,param_count")
    for r in rows:
        lines.append(f"{r.sim_mode},{r.fold},{r.fold_miou:.6f},{r.mean_miou:.6f},{r.param_count}")
    atomic_write_text(path, "\n".join(lines) + "\n")
