"""Command-line entry point: train | eval | ablate | energy-map | synth-data | grad-check.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure. Every artifact is written atomically and every report embeds the
resolved configuration and seed as header comments.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config
from .data import write_index
from .engine import (
    AblationRow, build_index, build_pipeline, build_split, episode_forward,
    rng_for, run_evaluation, run_training, sample_episode, write_ablation_report,
    write_eval_report, write_loss_log,
)
from .errors import (
    ConfigError, DataError, MshnetError, NumericalError, ShapeError,
    StateError, UsageError,
)
from .gradsuite import format_suite_table, run_gradient_suite, suite_passed
from .metrics import fb_iou, miou
from .serialization import load_checkpoint, save_checkpoint, save_tensor, write_pgm
from .similarity import energy_map
from .synth import render_synthetic
from .tensor import Tensor

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

ABLATION_MODES = ("both", "gps", "cosine")
ABLATION_MARGIN = 0.02


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse must not sys.exit(2) on bad flags
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mshnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in ("train", "eval", "ablate", "energy-map", "synth-data", "grad-check"):
        p = sub.add_parser(mode)
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--fold", type=int, default=None)
        p.add_argument("--scheme", choices=("contiguous", "interleaved"), default=None)
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--sim", choices=ABLATION_MODES, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--features", type=str, default=None,
                       help="pyramid replay directory (switches the backbone)")
        p.add_argument("--out", type=str, default=None, help="artifact directory")
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {
        "fold": args.fold,
        "scheme": args.scheme,
        "k": args.k,
        "sim": args.sim,
        "seed": args.seed,
        "features": args.features,
        "out": args.out,
    }
    if args.features is not None:
        overrides["backbone"] = "replay"
    return parse_config(args.config, overrides, mode=args.mode)


def _out_dir(config: RunConfig) -> Path:
    if config.out is None:
        raise ConfigError("this mode writes artifacts; set --out or the 'out' config key")
    path = Path(config.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_or_init(config: RunConfig):
    pipeline = build_pipeline(config)
    if config.checkpoint and Path(config.checkpoint).exists():
        pipeline = build_pipeline(config, params=load_checkpoint(config.checkpoint))
    return pipeline


def _cmd_train(config: RunConfig) -> int:
    out = _out_dir(config)
    if config.checkpoint is None:
        config = replace(config, checkpoint=str(out / "checkpoint.mshc"))
    result = run_training(config)
    write_loss_log(out / "train_loss.csv", config, result.history)
    last = result.history[-1].total if result.history else float("nan")
    print(f"trained {config.steps} steps; final loss {last:.4f}; "
          f"checkpoint at {config.checkpoint}")
    return EXIT_OK


def _cmd_eval(config: RunConfig) -> int:
    out = _out_dir(config)
    index = build_index(config)
    spec = build_split(config, index)
    pipeline = _load_or_init(config)
    result = run_evaluation(pipeline, index, spec, config.k, config.episodes,
                            config.seed, split=config.eval_on)
    write_eval_report(out / "eval_report.csv", config, result, config.fold)
    print(f"evaluated {result.episodes} episodes: mIoU {miou(result):.4f}, "
          f"FB-IoU {fb_iou(result):.4f}")
    if result.degenerate_episodes:
        print(f"note: {result.degenerate_episodes} episodes had degenerate "
              f"(empty) support at some scale", file=sys.stderr)
    return EXIT_OK


def _cmd_ablate(config: RunConfig) -> int:
    """Train + evaluate each similarity mode on identical seeds and budgets."""
    out = _out_dir(config)
    rows = []
    for sim_mode in ABLATION_MODES:
        variant = replace(config, sim=sim_mode,
                          checkpoint=str(out / f"ablate_{sim_mode}.mshc"))
        result = run_training(variant)
        eval_result = run_evaluation(result.pipeline, result.index, result.spec,
                                     variant.k, variant.episodes, variant.seed,
                                     split=variant.eval_on)
        score = miou(eval_result)
        rows.append(AblationRow(sim_mode, variant.fold, score, score,
                                result.pipeline.model_params.element_count()))
    by_mode = {r.sim_mode: r.fold_miou for r in rows}
    direction_ok = by_mode["both"] >= max(by_mode["gps"], by_mode["cosine"]) - ABLATION_MARGIN
    write_ablation_report(out / "ablation.csv", config, rows, direction_ok)
    for r in rows:
        print(f"{r.sim_mode:>6}: mIoU {r.fold_miou:.4f} ({r.param_count} parameters)")
    if not direction_ok:
        print("warning: combined similarities scored more than the margin below "
              "the best single mode; flagged in the report", file=sys.stderr)
    return EXIT_OK


def _cmd_energy_map(config: RunConfig) -> int:
    """Export per-block energy maps for one seeded episode."""
    out = _out_dir(config)
    index = build_index(config)
    spec = build_split(config, index)
    pipeline = _load_or_init(config)
    split = config.eval_on if spec.test_classes or config.eval_on == "train" else "train"
    episode = sample_episode(index, spec, config.k, rng_for(config.seed, 0xE6),
                             pipeline.loader, split)
    result, _ = episode_forward(pipeline, episode)
    for bid, maps in sorted(result.block_maps.items()):
        energy = energy_map(maps)
        save_tensor(out / f"energy_block{bid}.msht", Tensor(energy.data.astype(np.float32)))
        write_pgm(out / f"energy_block{bid}.pgm", energy.data)
        print(f"block {bid}: {len(maps)} similarity maps -> "
              f"energy_block{bid}.msht / .pgm")
    return EXIT_OK


def _cmd_synth_data(config: RunConfig) -> int:
    """Generate the synthetic corpus: index, image tensors, label maps.

    With --features also writes the pyramid replay directory (tiny-backbone
    features plus label maps) so the same corpus can be replayed.
    """
    out = _out_dir(config)
    index = build_index(config)
    write_index(out / "index.tsv", index)
    (out / "images").mkdir(exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    for entry in index.entries:
        image, labels = render_synthetic(entry.source)
        save_tensor(out / "images" / f"{entry.image_id}.msht", Tensor(image))
        save_tensor(out / "labels" / f"{entry.image_id}.msht",
                    Tensor(labels[None].astype(np.float32)))
    print(f"wrote {len(index.entries)} synthetic images to {out}")
    if config.features:
        _export_replay_dir(config, index)
        print(f"wrote replay features to {config.features}")
    return EXIT_OK


def _export_replay_dir(config: RunConfig, index) -> None:
    from .backbone import extract_pyramid, save_pyramid

    tiny = replace(config, backbone="tiny", features=None)
    pipeline = build_pipeline(tiny)
    root = Path(config.features)
    root.mkdir(parents=True, exist_ok=True)
    for entry in index.entries:
        image, labels = render_synthetic(entry.source)
        pyramid = extract_pyramid(Tensor(image), pipeline.backbone_config,
                                  pipeline.backbone_params)
        save_pyramid(root / f"{entry.image_id}.mshp", pyramid)
        save_tensor(root / f"{entry.image_id}.labels.msht",
                    Tensor(labels[None].astype(np.float32)))


def _cmd_grad_check(config: RunConfig) -> int:
    entries = run_gradient_suite(op_seeds=100, episode_seeds=3, seed_base=config.seed)
    table = format_suite_table(entries)
    print(table)
    if config.out:
        out = _out_dir(config)
        header = f"# config = {config.to_json()}\n# seed = {config.seed}\n"
        from .serialization import atomic_write_text
        atomic_write_text(out / "grad_check.txt", header + table + "\n")
    return EXIT_OK if suite_passed(entries) else EXIT_NUMERICAL


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "energy-map": _cmd_energy_map,
    "synth-data": _cmd_synth_data,
    "grad-check": _cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        config = _config_from_args(args)
        return _COMMANDS[config.mode](config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ShapeError, StateError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MshnetError as exc:  # any future subclass defaults to config-ish
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
