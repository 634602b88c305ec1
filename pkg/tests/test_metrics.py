"""mIoU and FB-IoU against brute-force pixel counting."""

import numpy as np
import pytest

from mshnet.errors import UsageError
from mshnet.metrics import EvalResult, fb_iou, miou


def counting_oracle(pairs):
    """Brute-force per-pixel tallies over (class, pred, truth) episodes."""
    per_class = {}
    fg = [0, 0, 0]
    bg = [0, 0, 0]
    for cls, pred, true in pairs:
        tallies = per_class.setdefault(cls, [0, 0, 0])
        for p, t in zip(pred.reshape(-1), true.reshape(-1)):
            if p and t:
                tallies[0] += 1
                fg[0] += 1
                bg[1 if False else 0]  # no-op; keep structure flat
            elif p and not t:
                tallies[1] += 1
                fg[1] += 1
                bg[2] += 1
            elif not p and t:
                tallies[2] += 1
                fg[2] += 1
                bg[1] += 1
            else:
                bg[0] += 1
    ious = [c[0] / (c[0] + c[1] + c[2]) for c in per_class.values()
            if (c[0] + c[1] + c[2]) > 0]
    oracle_miou = sum(ious) / len(ious)
    fg_iou = fg[0] / (fg[0] + fg[1] + fg[2]) if sum(fg) else 0.0
    bg_iou = bg[0] / (bg[0] + bg[1] + bg[2]) if sum(bg) else 0.0
    return oracle_miou, (fg_iou + bg_iou) / 2


def test_perfect_prediction_scores_one():
    result = EvalResult()
    rng = np.random.default_rng(0)
    for cls in range(3):
        truth = (rng.uniform(size=(6, 6)) > 0.5).astype(np.uint8)
        result.update(cls, truth, truth)
    assert miou(result) == 1.0
    assert fb_iou(result) == 1.0


def test_disjoint_prediction_scores_zero():
    result = EvalResult()
    pred = np.zeros((4, 4), dtype=np.uint8)
    pred[:2] = 1
    truth = np.zeros((4, 4), dtype=np.uint8)
    truth[2:] = 1
    result.update(0, pred, truth)
    assert miou(result) == 0.0


def test_tp3_fp1_fn0_gives_075():
    result = EvalResult()
    pred = np.array([[1, 1], [1, 1]], dtype=np.uint8)
    truth = np.array([[1, 1], [1, 0]], dtype=np.uint8)
    result.update(0, pred, truth)
    assert result.class_counts[0].tolist() == [3, 1, 0]
    assert miou(result) == pytest.approx(0.75)


def test_all_foreground_on_half_foreground_truth():
    result = EvalResult()
    pred = np.array([1, 1], dtype=np.uint8)
    truth = np.array([1, 0], dtype=np.uint8)
    result.update(0, pred, truth)
    assert fb_iou(result) == pytest.approx(0.25)


def test_fb_iou_symmetric_under_label_swap():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pred = (rng.uniform(size=(5, 5)) > 0.5).astype(np.uint8)
        truth = (rng.uniform(size=(5, 5)) > 0.5).astype(np.uint8)
        a = EvalResult()
        a.update(0, pred, truth)
        b = EvalResult()
        b.update(0, 1 - pred, 1 - truth)
        assert fb_iou(a) == pytest.approx(fb_iou(b), abs=1e-12)


def test_matches_counting_oracle_exactly():
    rng = np.random.default_rng(2)
    result = EvalResult()
    pairs = []
    for _ in range(100):
        cls = int(rng.integers(0, 4))
        pred = (rng.uniform(size=(7, 5)) > rng.uniform(0.2, 0.8)).astype(np.uint8)
        truth = (rng.uniform(size=(7, 5)) > rng.uniform(0.2, 0.8)).astype(np.uint8)
        pairs.append((cls, pred, truth))
        result.update(cls, pred, truth)
    oracle_m, oracle_fb = counting_oracle(pairs)
    assert miou(result) == oracle_m
    assert fb_iou(result) == oracle_fb


def test_pooling_across_episodes_not_averaging():
    # two episodes of one class: IoUs 1.0 and 0.0, pooled counts give 0.5
    result = EvalResult()
    ones = np.ones((2, 2), dtype=np.uint8)
    zeros = np.zeros((2, 2), dtype=np.uint8)
    result.update(0, ones, ones)  # tp=4
    result.update(0, ones, zeros)  # fp=4
    assert miou(result) == pytest.approx(0.5)


def test_zero_denominator_class_excluded_and_reported():
    result = EvalResult()
    empty = np.zeros((3, 3), dtype=np.uint8)
    result.update(0, empty, empty)  # all-background episode: no fg pixels at all
    result.update(1, np.ones((3, 3), dtype=np.uint8), np.ones((3, 3), dtype=np.uint8))
    per_class = result.per_class_iou()
    assert per_class[0] is None
    assert per_class[1] == 1.0
    assert miou(result) == 1.0


def test_empty_result_rejected():
    with pytest.raises(UsageError):
        miou(EvalResult())
    with pytest.raises(UsageError):
        fb_iou(EvalResult())


def test_merge_accumulates():
    a = EvalResult()
    b = EvalResult()
    ones = np.ones((2, 2), dtype=np.uint8)
    a.update(0, ones, ones)
    b.update(0, ones, np.zeros((2, 2), dtype=np.uint8))
    b.degenerate_episodes = 1
    a.merge(b)
    assert a.episodes == 2
    assert a.degenerate_episodes == 1
    assert miou(a) == pytest.approx(0.5)
