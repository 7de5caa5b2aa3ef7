"""Procedural ten-class shape dataset for desk-scale experiments.

Each image shows one main object on a textured background, often with a
smaller distractor object of another class.  Aggressive crops therefore
frequently miss the labelled object or contain only the distractor, which is
the situation refined crop labels are meant to fix.  Classes come in visually
similar pairs and are bound to a three-level taxonomy.
"""
from pathlib import Path

import numpy as np

from .data import compute_channel_stats, make_dataset, write_class_names, write_packed, write_stats
from .taxonomy import TaxonomyTree, write_taxonomy

CLASS_NAMES = [
    "disk", "ring",
    "square", "frame",
    "triangle", "diamond",
    "hbars", "vbars",
    "plus", "saltire",
]

TAXONOMY_PARENTS = {
    "round": "shape",
    "angular": "shape",
    "striped": "shape",
    "crossed": "shape",
    "disk": "round",
    "ring": "round",
    "square": "angular",
    "frame": "angular",
    "triangle": "angular",
    "diamond": "angular",
    "hbars": "striped",
    "vbars": "striped",
    "plus": "crossed",
    "saltire": "crossed",
}


def toy_taxonomy():
    return TaxonomyTree(TAXONOMY_PARENTS, dict(enumerate(CLASS_NAMES)))


def _shape_mask(cls, dx, dy, r):
    ax, ay = np.abs(dx), np.abs(dy)
    cheb = np.maximum(ax, ay)
    d = np.hypot(dx, dy)
    name = CLASS_NAMES[cls]
    if name == "disk":
        return d <= r
    if name == "ring":
        return (d <= r) & (d >= 0.55 * r)
    if name == "square":
        return cheb <= 0.8 * r
    if name == "frame":
        return (cheb <= 0.85 * r) & (cheb >= 0.5 * r)
    if name == "triangle":
        half = (dy + r) / (1.8 * r) * 0.95 * r
        return (dy >= -r) & (dy <= 0.8 * r) & (ax <= half)
    if name == "diamond":
        return ax + ay <= r
    if name in ("hbars", "vbars"):
        along = dy if name == "hbars" else dx
        return (cheb <= 0.85 * r) & (np.floor((along + r) / (0.4 * r)) % 2 == 0)
    if name == "plus":
        return ((ax <= 0.25 * r) & (ay <= r)) | ((ay <= 0.25 * r) & (ax <= r))
    if name == "saltire":
        return (cheb <= 0.8 * r) & ((np.abs(dx - dy) <= 0.35 * r) | (np.abs(dx + dy) <= 0.35 * r))
    raise ValueError(cls)


def _background(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.2, 0.8, 3)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    for _ in range(2):
        fx, fy = rng.uniform(0.5, 3.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        img += rng.uniform(-0.12, 0.12, 3) * wave[..., None]
    return img


def _paint(rng, img, cls, cx, cy, r, supersample=2):
    size = img.shape[0]
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    cover = np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    for oy in offs:
        for ox in offs:
            cover += _shape_mask(cls, xx + ox - cx, yy + oy - cy, r)
    cover /= supersample ** 2
    bg_mean = img.mean(axis=(0, 1))
    color = rng.uniform(0, 1, 3)
    # keep the object visibly distinct from its background
    while np.abs(color - bg_mean).max() < 0.35:
        color = rng.uniform(0, 1, 3)
    img *= 1 - cover[..., None]
    img += cover[..., None] * color


def render_image(rng, cls, size=32, distractor=None, distractor_scale=(0.45, 0.7), main_radius=(6.5, 10.0)):
    """One [0, 1] image of class ``cls`` (``H x W x 3``), optional distractor class."""
    img = _background(rng, size)
    r = rng.uniform(*main_radius)
    cx, cy = rng.uniform(r, size - r, 2)
    if distractor is not None:
        rd = r * rng.uniform(*distractor_scale)
        # put the distractor in the emptier half of the image
        for _ in range(20):
            dx, dy = rng.uniform(rd, size - rd, 2)
            if np.hypot(dx - cx, dy - cy) > r + rd + 1:
                break
        _paint(rng, img, distractor, dx, dy, rd)
    _paint(rng, img, cls, cx, cy, r)
    img += rng.normal(0, 0.03, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def composite_image(rng, left_cls, right_cls, size=32):
    """Two equal-size objects side by side, for crop-level audits."""
    img = _background(rng, size)
    r = size / 4.6
    _paint(rng, img, left_cls, size * 0.25, size / 2, r)
    _paint(rng, img, right_cls, size * 0.75, size / 2, r)
    return np.clip(img, 0, 1).astype(np.float32)


def generate(n, seed, size=32, distractor_prob=0.6, label_noise=0.1, num_classes=10, main_radius=(6.5, 10.0)):
    """Return ``(raw_images, labels, true_classes)`` with balanced true classes."""
    rng = np.random.default_rng(seed)
    true = np.arange(n) % num_classes
    rng.shuffle(true)
    images = np.empty((n, size, size, 3), np.float32)
    for i, cls in enumerate(true):
        distractor = None
        if rng.random() < distractor_prob:
            distractor = (cls + rng.integers(1, num_classes)) % num_classes
        images[i] = render_image(rng, cls, size, distractor, main_radius=main_radius)
    labels = true.copy()
    flip = rng.random(n) < label_noise
    labels[flip] = (true[flip] + rng.integers(1, num_classes, flip.sum())) % num_classes
    return images, labels, true


def make_toy_datasets(n_train=5000, n_val=1000, seed=0, size=32, distractor_prob=0.6, label_noise=0.1,
                      main_radius=(6.5, 10.0)):
    """Standardized train and validation :class:`~label_refinery.data.Dataset` pair."""
    tr_raw, tr_lab, _ = generate(n_train, [seed, 0], size, distractor_prob, label_noise, main_radius=main_radius)
    va_raw, va_lab, _ = generate(n_val, [seed, 1], size, distractor_prob, label_noise, main_radius=main_radius)
    mean, std = compute_channel_stats(tr_raw)
    train = make_dataset(tr_raw, tr_lab, CLASS_NAMES, "train", mean=mean, std=std)
    val = make_dataset(va_raw, va_lab, CLASS_NAMES, "val", ids=np.arange(n_val) + n_train, mean=mean, std=std)
    return train, val


def write_toy_dataset(root, n_train=5000, n_val=1000, seed=0, size=32, distractor_prob=0.6, label_noise=0.1,
                      main_radius=(6.5, 10.0)):
    """Write a complete dataset directory (packed splits, class names, stats, taxonomy)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    tr_raw, tr_lab, _ = generate(n_train, [seed, 0], size, distractor_prob, label_noise, main_radius=main_radius)
    va_raw, va_lab, _ = generate(n_val, [seed, 1], size, distractor_prob, label_noise, main_radius=main_radius)
    write_packed(root / "train.lrds", tr_raw, tr_lab, len(CLASS_NAMES))
    write_packed(root / "val.lrds", va_raw, va_lab, len(CLASS_NAMES), ids=np.arange(n_val) + n_train)
    write_class_names(root / "classes.tsv", CLASS_NAMES)
    write_stats(root / "stats.tsv", *compute_channel_stats(tr_raw))
    write_taxonomy(toy_taxonomy(), root / "taxonomy.tsv", root / "leaves.tsv")
    return root
