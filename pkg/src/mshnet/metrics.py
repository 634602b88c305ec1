"""Segmentation scoring: pooled per-class IoU and foreground/background IoU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError


@dataclass
class EvalResult:
    """Pixel-count accumulators pooled over all evaluated episodes.

    Counts are pooled per class across episodes (not per-episode IoU
    averaging). The foreground/background accumulators ignore class
    identity entirely.
    """
    class_counts: dict[int, np.ndarray] = field(default_factory=dict)  # cls -> [tp, fp, fn]
    fg_counts: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    bg_counts: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    episodes: int = 0
    degenerate_episodes: int = 0

    def update(self, class_id: int, predicted: np.ndarray, truth: np.ndarray) -> None:
        pred = np.asarray(predicted).astype(bool)
        true = np.asarray(truth).astype(bool)
        if pred.shape != true.shape:
            raise UsageError(f"prediction shape {pred.shape} != truth shape {true.shape}")
        tp = int(np.sum(pred & true))
        fp = int(np.sum(pred & ~true))
        fn = int(np.sum(~pred & true))
        counts = self.class_counts.setdefault(class_id, np.zeros(3, dtype=np.int64))
        counts += (tp, fp, fn)
        self.fg_counts += (tp, fp, fn)
        # background IoU treats class-0 (non-object) pixels as the positive set
        bg_tp = int(np.sum(~pred & ~true))
        self.bg_counts += (bg_tp, fn, fp)
        self.episodes += 1

    def merge(self, other: "EvalResult") -> None:
        for cls, counts in other.class_counts.items():
            mine = self.class_counts.setdefault(cls, np.zeros(3, dtype=np.int64))
            mine += counts
        self.fg_counts += other.fg_counts
        self.bg_counts += other.bg_counts
        self.episodes += other.episodes
        self.degenerate_episodes += other.degenerate_episodes

    def per_class_iou(self) -> dict[int, float | None]:
        """IoU per class; None where the denominator is zero."""
        out = {}
        for cls in sorted(self.class_counts):
            tp, fp, fn = self.class_counts[cls]
            denom = tp + fp + fn
            out[cls] = float(tp / denom) if denom else None
        return out


def _iou(counts: np.ndarray) -> float | None:
    tp, fp, fn = counts
    denom = tp + fp + fn
    return float(tp / denom) if denom else None


def miou(result: EvalResult) -> float:
    """Mean over classes of pooled TP / (TP + FP + FN).

    Classes whose denominator is zero are excluded from the mean; they
    remain visible through per_class_iou().
    """
    if not result.class_counts:
        raise UsageError("no accumulated evaluation data")
    ious = [v for v in result.per_class_iou().values() if v is not None]
    if not ious:
        raise UsageError("every class has an empty denominator")
    return float(np.mean(ious))


def fb_iou(result: EvalResult) -> float:
    """Mean of class-agnostic foreground IoU and background IoU."""
    if result.episodes == 0:
        raise UsageError("no accumulated evaluation data")
    fg = _iou(result.fg_counts)
    bg = _iou(result.bg_counts)
    return ((fg or 0.0) + (bg or 0.0)) / 2.0
