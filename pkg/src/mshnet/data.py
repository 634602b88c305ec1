"""Dataset model, fold construction, leakage filtering, episode sampling.

The dataset index is a line-oriented text file:
    image_id <tab> path-or-SYNTH:spec <tab> comma-separated class ids
Class ids are zero-based and global to the dataset (20 for Pascal-style
splits, 80 for COCO-style, or whatever a synthetic corpus declares).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DataError, FormatError, UsageError
from .serialization import atomic_write_text
from .tensor import Tensor

PASCAL_CLASS_NAMES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle",
    "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)

FOLD_SCHEMES = ("contiguous", "interleaved")
N_FOLDS = 4


@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    source: str  # file path or a SYNTH: spec string
    class_ids: frozenset[int]


@dataclass
class DatasetIndex:
    entries: list[ImageEntry]
    num_classes: int

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.image_id in seen:
                raise DataError(f"duplicate image id: {e.image_id}")
            seen.add(e.image_id)
            if not e.class_ids:
                raise DataError(f"image {e.image_id} lists no classes")
            bad = [c for c in e.class_ids if not 0 <= c < self.num_classes]
            if bad:
                raise DataError(f"image {e.image_id} has class ids {bad} outside "
                                f"[0, {self.num_classes})")

    def images_of_class(self, class_id: int) -> list[ImageEntry]:
        return [e for e in self.entries if class_id in e.class_ids]

    def by_id(self, image_id: str) -> ImageEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise DataError(f"unknown image id: {image_id}")


@dataclass(frozen=True)
class FoldSpec:
    """One cross-validation fold: held-out test classes vs train classes."""
    fold: int
    scheme: str
    test_classes: frozenset[int]
    train_classes: frozenset[int]

    def __post_init__(self):
        if self.test_classes & self.train_classes:
            raise DataError("test and train classes overlap")


def build_folds(num_classes: int, fold: int, scheme: str) -> FoldSpec:
    """Split classes 4 ways: contiguous runs or the interleaved {4x + i} rule."""
    if fold not in range(N_FOLDS):
        raise UsageError(f"fold must be in 0..3, got {fold}")
    if scheme not in FOLD_SCHEMES:
        raise UsageError(f"scheme must be one of {FOLD_SCHEMES}, got {scheme!r}")
    if num_classes % N_FOLDS:
        raise UsageError(f"class count {num_classes} not divisible by {N_FOLDS}")
    per_fold = num_classes // N_FOLDS
    if scheme == "contiguous":
        test = frozenset(range(per_fold * fold, per_fold * (fold + 1)))
    else:
        test = frozenset(4 * x + fold for x in range(per_fold))
    train = frozenset(range(num_classes)) - test
    return FoldSpec(fold, scheme, test, train)


def filter_train_images(index: DatasetIndex, spec: FoldSpec, cap: int,
                        seed: int) -> DatasetIndex:
    """Drop every image showing a test class, then cap each train class.

    Per train class at most ``cap`` images are kept (a uniform sample
    without replacement); an image kept for one class stays usable for
    every train class it contains.
    """
    if cap < 1:
        raise UsageError(f"cap must be >= 1, got {cap}")
    clean = [e for e in index.entries if not (e.class_ids & spec.test_classes)]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF17]))
    kept_ids: set[str] = set()
    for cls in sorted(spec.train_classes):
        candidates = [e.image_id for e in clean if cls in e.class_ids]
        if not candidates:
            raise DataError(f"train class {cls} has no images left after filtering")
        if len(candidates) > cap:
            chosen = rng.choice(len(candidates), size=cap, replace=False)
            kept_ids.update(candidates[i] for i in chosen)
        else:
            kept_ids.update(candidates)
    return DatasetIndex([e for e in clean if e.image_id in kept_ids], index.num_classes)


@dataclass
class EpisodeSample:
    image_id: str
    payload: object  # image tensor or feature pyramid, whatever the loader yields
    mask: Tensor  # (1,H,W) binary mask for the episode class


@dataclass
class Episode:
    class_id: int
    support: list[EpisodeSample]
    query: EpisodeSample

    def __post_init__(self):
        ids = [s.image_id for s in self.support] + [self.query.image_id]
        if len(set(ids)) != len(ids):
            raise DataError("support and query images must be distinct")
        for s in self.support + [self.query]:
            m = s.mask.data
            if not np.all((m == 0) | (m == 1)):
                raise DataError(f"mask of {s.image_id} is not binary")


Loader = Callable[[ImageEntry, int], tuple[object, Tensor]]


def sample_episode(index: DatasetIndex, spec: FoldSpec, k: int,
                   rng: np.random.Generator, loader: Loader,
                   split: str = "train") -> Episode:
    """Class-first episode sampling: pick an eligible class uniformly, then
    K+1 distinct images of it; the last one becomes the query."""
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    pool = spec.train_classes if split == "train" else spec.test_classes
    eligible = sorted(c for c in pool if len(index.images_of_class(c)) >= k + 1)
    if not eligible:
        raise DataError(f"no {split} class has at least {k + 1} images")
    cls = int(eligible[rng.integers(len(eligible))])
    candidates = index.images_of_class(cls)
    picks = rng.choice(len(candidates), size=k + 1, replace=False)
    samples = []
    for i in picks:
        entry = candidates[i]
        payload, mask = loader(entry, cls)
        samples.append(EpisodeSample(entry.image_id, payload, mask))
    return Episode(cls, samples[:k], samples[k])


def write_index(path: str | Path, index: DatasetIndex) -> None:
    lines = [f"# classes={index.num_classes}"]
    for e in index.entries:
        ids = ",".join(str(c) for c in sorted(e.class_ids))
        lines.append(f"{e.image_id}\t{e.source}\t{ids}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_index(path: str | Path) -> DatasetIndex:
    text = Path(path).read_text()
    num_classes = None
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if "classes=" in line:
                num_classes = int(line.split("classes=")[1])
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        image_id, source, ids = parts
        try:
            class_ids = frozenset(int(c) for c in ids.split(","))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad class id list {ids!r}") from exc
        entries.append(ImageEntry(image_id, source, class_ids))
    if num_classes is None:
        raise FormatError(f"{path}: missing '# classes=N' header")
    return DatasetIndex(entries, num_classes)
