"""Reproducible synthetic corpus: colored geometric shapes on noise.

Each image is fully described by its SYNTH spec string, so an index file
alone regenerates the corpus bit for bit. Shape kinds double as class
ids; masks are exact by construction.
"""

from __future__ import annotations

import re

import numpy as np

from .data import DatasetIndex, ImageEntry
from .errors import DataError, FormatError
from .tensor import Tensor

SHAPE_KINDS = ("disk", "box", "triangle", "diamond", "ring", "cross", "hbar", "vbar")

_PALETTE = np.array([
    (0.85, 0.15, 0.15),  # disk: red
    (0.15, 0.25, 0.90),  # box: blue
    (0.10, 0.80, 0.20),  # triangle: green
    (0.90, 0.85, 0.10),  # diamond: yellow
    (0.85, 0.15, 0.80),  # ring: magenta
    (0.10, 0.80, 0.85),  # cross: cyan
    (0.95, 0.55, 0.10),  # hbar: orange
    (0.95, 0.95, 0.95),  # vbar: white
])

_SPEC_RE = re.compile(r"^SYNTH:v1;size=(\d+)x(\d+);seed=(\d+);items=(.+)$")
_ITEM_RE = re.compile(r"^([a-z]+):(\d+):(\d+):(\d+)$")


def _shape_mask(kind: str, h: int, w: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "box":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) * 2 <= dy + r)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 * 4 >= r * r)
    if kind == "cross":
        arm = max(r // 3, 1)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if kind == "hbar":
        return (np.abs(dy) * 2 <= r) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) * 2 <= r) & (np.abs(dy) <= r)
    raise FormatError(f"unknown shape kind: {kind!r}")


def render_synthetic(source: str) -> tuple[np.ndarray, np.ndarray]:
    """Spec string -> (image (3,H,W) float32 in [0,1], label map (H,W) uint8).

    Label 0 is background; shape classes are stored as class_id + 1.
    Later items overwrite earlier ones where they overlap.
    """
    m = _SPEC_RE.match(source)
    if not m:
        raise FormatError(f"not a synthetic image spec: {source!r}")
    h, w, seed = int(m.group(1)), int(m.group(2)), int(m.group(3))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
    image = rng.uniform(0.05, 0.40, size=(3, h, w)).astype(np.float32)
    labels = np.zeros((h, w), dtype=np.uint8)
    for item in m.group(4).split("+"):
        im = _ITEM_RE.match(item)
        if not im:
            raise FormatError(f"bad item spec: {item!r}")
        kind = im.group(1)
        if kind not in SHAPE_KINDS:
            raise FormatError(f"unknown shape kind: {kind!r}")
        cy, cx, r = int(im.group(2)), int(im.group(3)), int(im.group(4))
        mask = _shape_mask(kind, h, w, cy, cx, r)
        if not mask.any():
            raise DataError(f"item {item!r} rasterizes to an empty mask")
        cls = SHAPE_KINDS.index(kind)
        tint = _PALETTE[cls][:, None] * rng.uniform(0.88, 1.0)
        pixels = tint + rng.uniform(-0.04, 0.04, size=(3, int(mask.sum())))
        image[:, mask] = np.clip(pixels, 0.0, 1.0).astype(np.float32)
        labels[mask] = cls + 1
    return image, labels


def synthetic_loader(entry: ImageEntry, class_id: int) -> tuple[Tensor, Tensor]:
    """Episode loader: renders the image and binarizes its labels to one class."""
    image, labels = render_synthetic(entry.source)
    mask = (labels == class_id + 1).astype(np.float32)
    return Tensor(image), Tensor(mask[None])


def make_synthetic_index(num_classes: int, images_per_class: int, size: int,
                         seed: int) -> DatasetIndex:
    """A corpus where every class appears in at least images_per_class images.

    Each image holds one or two shapes of distinct classes placed in
    opposite halves, so masks never overlap and are never empty.
    """
    if not 1 <= num_classes <= len(SHAPE_KINDS):
        raise DataError(f"num_classes must be in 1..{len(SHAPE_KINDS)}, got {num_classes}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    entries = []
    serial = 0
    for cls in range(num_classes):
        for _ in range(images_per_class):
            items = [(cls, "left" if rng.random() < 0.5 else "right")]
            if num_classes > 1 and rng.random() < 0.5:
                other = int(rng.choice([c for c in range(num_classes) if c != cls]))
                items.append((other, "right" if items[0][1] == "left" else "left"))
            specs = []
            present = set()
            for item_cls, half in items:
                if len(items) == 1:
                    # a lone shape can be large; paired shapes must fit a half
                    r = int(rng.integers(size // 5, size // 4 + 1))
                else:
                    r = int(rng.integers(size // 8, size // 6 + 1))
                cy = int(rng.integers(r + 1, size - r - 1))
                lo, hi = (r + 1, size // 2 - r - 1) if half == "left" else \
                    (size // 2 + r + 1, size - r - 1)
                cx = int(rng.integers(lo, max(lo + 1, hi)))
                specs.append(f"{SHAPE_KINDS[item_cls]}:{cy}:{cx}:{r}")
                present.add(item_cls)
            source = (f"SYNTH:v1;size={size}x{size};seed={int(rng.integers(2 ** 31))};"
                      f"items={'+'.join(specs)}")
            entries.append(ImageEntry(f"synth{serial:05d}", source, frozenset(present)))
            serial += 1
    return DatasetIndex(entries, num_classes)
