"""Synthetic shapes dataset: one coloured shape on a textured background.

Classification label = shape class. Segmentation masks use 0 for the
background, ``class + 1`` for the shape, and the ignore value on a
one-pixel band around the shape outline.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .pipeline import RawImage, save_image, save_mask, stage_seed
from .segmetrics import IGNORE_LABEL, LabelMap

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond")
PALETTE = np.array([
    [220, 50, 40],
    [40, 170, 60],
    [50, 80, 220],
    [230, 200, 30],
    [180, 60, 200],
    [30, 200, 210],
], dtype=np.float64)


def _shape_mask(shape, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    if shape == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if shape == "triangle":
        return (dy <= 0.7 * r) & (dy >= -r + 1.7 * np.abs(dx))
    if shape == "cross":
        arm = 0.3 * r
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if shape == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise ValueError(f"unknown shape {shape!r}")


def _background(size, rng):
    coarse = rng.uniform(60, 160, size=(4, 4, 3))
    idx = np.linspace(0, 3, size)
    i0 = np.floor(idx).astype(int).clip(0, 2)
    t = (idx - i0)[:, None]
    rows = coarse[i0] * (1 - t[..., None]) + coarse[i0 + 1] * t[..., None]
    t2 = (idx - i0)[None, :, None]
    img = rows[:, i0] * (1 - t2) + rows[:, i0 + 1] * t2
    return img + rng.normal(0, 8, size=(size, size, 3))


def make_sample(class_id, size=40, rng=None, num_classes=4):
    rng = rng or np.random.default_rng()
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = rng.uniform(0.25, 0.38) * size
    cy = rng.uniform(r, size - r)
    cx = rng.uniform(r, size - r)
    inside = _shape_mask(SHAPES[class_id], yy, xx, cy, cx, r)
    grown = _shape_mask(SHAPES[class_id], yy, xx, cy, cx, r + 1.0)
    shrunk = _shape_mask(SHAPES[class_id], yy, xx, cy, cx, max(r - 1.0, 1.0))
    color = PALETTE[class_id] * rng.uniform(0.8, 1.1) + rng.normal(0, 12, size=3)
    img = _background(size, rng)
    img[inside] = color + rng.normal(0, 6, size=(int(inside.sum()), 3))
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    labels = np.where(inside, class_id + 1, 0)
    labels[grown & ~shrunk] = IGNORE_LABEL
    return pixels, labels


def generate(n, num_classes=4, size=40, seed=0, prefix="shape"):
    """``n`` RawImages with balanced labels and masks, fully determined by ``seed``."""
    if not 1 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must lie in [1, {len(SHAPES)}]")
    rng = np.random.default_rng(stage_seed(seed, "synthetic"))
    out = []
    for i in range(n):
        c = i % num_classes
        pixels, labels = make_sample(c, size, rng, num_classes)
        out.append(RawImage(pixels, f"{prefix}_{i:05d}", c, LabelMap(labels, num_classes + 1)))
    return out


def write_dataset(root, splits=None, num_classes=4, size=40, seed=0):
    """Write classification and segmentation trees under ``root``.

    Layout: ``classification/<split>/<shape>/<stem>.png`` and
    ``segmentation/<split>/{images,masks}/<stem>.png``.
    """
    root = Path(root)
    splits = splits or {"train": 200, "val": 100, "test": 200}
    written = {}
    for k, (split, n) in enumerate(splits.items()):
        samples = generate(n, num_classes, size, stage_seed(seed, f"split:{split}"), prefix=split)
        for sub in ("images", "masks"):
            (root / "segmentation" / split / sub).mkdir(parents=True, exist_ok=True)
        for c in range(num_classes):
            (root / "classification" / split / SHAPES[c]).mkdir(parents=True, exist_ok=True)
        for s in samples:
            stem = s.source_path
            save_image(s.pixels, root / "classification" / split / SHAPES[s.label] / f"{stem}.png")
            save_image(s.pixels, root / "segmentation" / split / "images" / f"{stem}.png")
            save_mask(s.label_map.labels, root / "segmentation" / split / "masks" / f"{stem}.png")
        written[split] = n
    return written
