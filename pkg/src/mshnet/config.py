"""Run configuration: JSON file plus flag overrides, fully validated."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError

MODES = ("train", "eval", "ablate", "energy-map", "synth-data", "grad-check")
SIM_CHOICES = ("both", "gps", "cosine")
BACKBONE_CHOICES = ("tiny", "replay")
HOLDOUT_CHOICES = ("fold", "none")
EVAL_ON_CHOICES = ("test", "train")

# training hyperparameter defaults follow the reference recipe
_DEFAULTS: dict = {
    "seed": None,  # mandatory: reproducibility is not optional
    "k": 1,
    "fold": 0,
    "scheme": "contiguous",
    "holdout": "fold",
    "sim": "both",
    "backbone": "tiny",
    "features": None,
    "index": None,
    "synth_classes": 4,
    "synth_images_per_class": 12,
    "image_size": 64,
    "backbone_channels": [16, 32, 64],
    "backbone_layers": [2, 2, 2],
    "stem_channels": 8,
    "hidden_channels": 64,
    "attention_ratio": 4,
    "atrous_rates": [1, 2, 4],
    "lr": 0.025,
    "momentum": 0.9,
    "weight_decay": 0.0005,
    "gamma": 0.9,
    "steps_per_epoch": 100,
    "batch_size": 10,
    "steps": 500,
    "episodes": 200,
    "cap": 750,
    "eval_on": "test",
    "checkpoint": None,
    "checkpoint_every": 0,
    "out": None,
}


@dataclass(frozen=True)
class RunConfig:
    mode: str
    seed: int
    k: int = 1
    fold: int = 0
    scheme: str = "contiguous"
    holdout: str = "fold"
    sim: str = "both"
    backbone: str = "tiny"
    features: str | None = None
    index: str | None = None
    synth_classes: int = 4
    synth_images_per_class: int = 12
    image_size: int = 64
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    backbone_layers: tuple[int, ...] = (2, 2, 2)
    stem_channels: int = 8
    hidden_channels: int = 64
    attention_ratio: int = 4
    atrous_rates: tuple[int, ...] = (1, 2, 4)
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 0.0005
    gamma: float = 0.9
    steps_per_epoch: int = 100
    batch_size: int = 10
    steps: int = 500
    episodes: int = 200
    cap: int = 750
    eval_on: str = "test"
    checkpoint: str | None = None
    checkpoint_every: int = 0
    out: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _require(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"config key '{key}': {message}")


def _as_int(key: str, value) -> int:
    _require(isinstance(value, int) and not isinstance(value, bool), key,
             f"expected an integer, got {value!r}")
    return value


def _as_float(key: str, value) -> float:
    _require(isinstance(value, (int, float)) and not isinstance(value, bool), key,
             f"expected a number, got {value!r}")
    return float(value)


def _as_enum(key: str, value, choices) -> str:
    _require(value in choices, key, f"expected one of {choices}, got {value!r}")
    return value


def _as_int_tuple(key: str, value) -> tuple[int, ...]:
    _require(isinstance(value, (list, tuple)) and value and
             all(isinstance(v, int) and not isinstance(v, bool) for v in value),
             key, f"expected a non-empty list of integers, got {value!r}")
    return tuple(value)


def _as_opt_str(key: str, value) -> str | None:
    _require(value is None or isinstance(value, str), key,
             f"expected a string or null, got {value!r}")
    return value


def parse_config(path: str | Path | None = None, overrides: dict | None = None,
                 mode: str = "eval") -> RunConfig:
    """Merge defaults <- JSON file <- flag overrides, then validate.

    Unknown keys are rejected with their key path; flag overrides win
    over file values.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode: {mode!r}")
    data = dict(_DEFAULTS)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(_DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        data.update(loaded)
    for key, value in (overrides or {}).items():
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        if value is not None:
            data[key] = value

    _require(data["seed"] is not None, "seed", "required for reproducibility")
    seed = _as_int("seed", data["seed"])
    k = _as_int("k", data["k"])
    _require(k >= 1, "k", f"must be >= 1, got {k}")
    fold = _as_int("fold", data["fold"])
    _require(fold in range(4), "fold", f"must be in 0..3, got {fold}")
    lr = _as_float("lr", data["lr"])
    _require(lr > 0, "lr", f"must be > 0, got {lr}")
    gamma = _as_float("gamma", data["gamma"])
    _require(0 < gamma <= 1, "gamma", f"must be in (0, 1], got {gamma}")
    for key in ("steps", "episodes", "batch_size", "steps_per_epoch", "cap",
                "synth_classes", "synth_images_per_class", "image_size",
                "hidden_channels", "attention_ratio", "stem_channels"):
        data[key] = _as_int(key, data[key])
        _require(data[key] >= (0 if key == "steps" else 1), key,
                 f"must be positive, got {data[key]}")
    backbone = _as_enum("backbone", data["backbone"], BACKBONE_CHOICES)
    features = _as_opt_str("features", data["features"])
    if backbone == "replay":
        _require(features is not None, "features",
                 "required when backbone is 'replay'")
    return RunConfig(
        mode=mode,
        seed=seed,
        k=k,
        fold=fold,
        scheme=_as_enum("scheme", data["scheme"], ("contiguous", "interleaved")),
        holdout=_as_enum("holdout", data["holdout"], HOLDOUT_CHOICES),
        sim=_as_enum("sim", data["sim"], SIM_CHOICES),
        backbone=backbone,
        features=features,
        index=_as_opt_str("index", data["index"]),
        synth_classes=data["synth_classes"],
        synth_images_per_class=data["synth_images_per_class"],
        image_size=data["image_size"],
        backbone_channels=_as_int_tuple("backbone_channels", data["backbone_channels"]),
        backbone_layers=_as_int_tuple("backbone_layers", data["backbone_layers"]),
        stem_channels=data["stem_channels"],
        hidden_channels=data["hidden_channels"],
        attention_ratio=data["attention_ratio"],
        atrous_rates=_as_int_tuple("atrous_rates", data["atrous_rates"]),
        lr=lr,
        momentum=_as_float("momentum", data["momentum"]),
        weight_decay=_as_float("weight_decay", data["weight_decay"]),
        gamma=gamma,
        steps_per_epoch=data["steps_per_epoch"],
        batch_size=data["batch_size"],
        steps=data["steps"],
        episodes=data["episodes"],
        cap=data["cap"],
        eval_on=_as_enum("eval_on", data["eval_on"], EVAL_ON_CHOICES),
        checkpoint=_as_opt_str("checkpoint", data["checkpoint"]),
        checkpoint_every=_as_int("checkpoint_every", data["checkpoint_every"]),
        out=_as_opt_str("out", data["out"]),
    )
