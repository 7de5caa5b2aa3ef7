"""Datasets, the stochastic crop function, batching and label vectors.

Images are stored channel-last (``H x W x C``) and already standardized with
per-channel statistics computed once from the training split.  Batches handed
to models are ``N x C x H x W``.
"""
import hashlib
import io
import os
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, ConfigError, InvalidInputError

PACKED_MAGIC = b"LRDS"
STATS_FILE = "stats.tsv"
CLASSES_FILE = "classes.tsv"

# named random sub-streams; toggling one feature must not shift another's draws
STREAMS = {"init": 1, "shuffle": 2, "crop": 3, "eval": 4, "data": 5, "audit": 6}


def stream(seed, name, *keys):
    """Independent generator for the sub-stream ``name`` keyed by integers."""
    seq = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],) + tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))


# --------------------------------------------------------------------------
# Label vectors
# --------------------------------------------------------------------------


def one_hot(class_index, num_classes, dtype=np.float32):
    """Probability 1 at ``class_index``.  Accepts a scalar or an integer array."""
    idx = np.asarray(class_index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise InvalidInputError(f"class index must be an integer, got {class_index!r}")
    if np.any(idx < 0) or np.any(idx >= num_classes):
        raise InvalidInputError(f"class index {class_index} outside [0, {num_classes})")
    out = np.zeros(idx.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, idx[..., None], 1, axis=-1)
    return out


def check_simplex(p, atol=1e-6, name="label"):
    """Raise unless every row of ``p`` is a probability vector."""
    p = np.asarray(p)
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidInputError(f"{name} has negative or non-finite entries")
    if not np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=atol):
        raise InvalidInputError(f"{name} rows do not sum to 1")
    return p


# --------------------------------------------------------------------------
# Crops
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CropSpec:
    """Crop rectangle in source pixels plus a horizontal-flip flag."""

    x: int
    y: int
    w: int
    h: int
    hflip: bool = False

    def in_bounds(self, source_w, source_h):
        return self.x >= 0 and self.y >= 0 and self.w >= 1 and self.h >= 1 \
            and self.x + self.w <= source_w and self.y + self.h <= source_h

    def area_fraction(self, source_w, source_h):
        return self.w * self.h / (source_w * source_h)


def sample_crop(rng, source_w, source_h, area_range=(0.08, 1.0),
                ratio_range=(3 / 4, 4 / 3), max_attempts=10):
    """Draw a random crop whose area fraction is uniform on ``area_range``.

    The aspect ratio (w/h) is log-uniform over the part of ``ratio_range``
    for which a rectangle of the drawn area still fits inside the source, so
    large areas are never rejected for their shape and the area marginal stays
    uniform.  Draws whose rounded size leaves the area range are retried; after
    ``max_attempts`` failures the whole image is used.
    """
    total = source_w * source_h
    lo_area, hi_area = area_range
    for _ in range(max_attempts):
        area = rng.uniform(lo_area, hi_area) * total
        r_lo = max(ratio_range[0], area / source_h ** 2)
        r_hi = min(ratio_range[1], source_w ** 2 / area)
        if r_lo > r_hi:
            continue
        ratio = np.exp(rng.uniform(np.log(r_lo), np.log(r_hi)))
        w = int(round(np.sqrt(area * ratio)))
        h = int(round(np.sqrt(area / ratio)))
        if not (1 <= w <= source_w and 1 <= h <= source_h):
            continue
        if not lo_area - 1e-12 <= w * h / total <= hi_area + 1e-12:
            continue
        x = int(rng.integers(0, source_w - w + 1))
        y = int(rng.integers(0, source_h - h + 1))
        return CropSpec(x, y, w, h, bool(rng.random() < 0.5))
    return CropSpec(0, 0, source_w, source_h, bool(rng.random() < 0.5))


def _interp_axis(start, extent, out_size, limit):
    # align-corners sampling: first/last output samples hit the window's edge pixels
    if out_size == 1:
        pos = np.array([start + (extent - 1) / 2.0])
    else:
        pos = start + np.arange(out_size) * ((extent - 1) / (out_size - 1))
    i0 = np.floor(pos).astype(np.intp)
    i0 = np.clip(i0, 0, limit - 1)
    i1 = np.minimum(i0 + 1, limit - 1)
    frac = (pos - i0).astype(np.float32)
    return i0, i1, frac


def extract_crop(image, spec, out_size):
    """Bilinear resize of the crop window to ``out_size x out_size`` (``H x W x C``)."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise InvalidInputError(f"expected an H x W x C image, got shape {image.shape}")
    src_h, src_w = image.shape[:2]
    if not spec.in_bounds(src_w, src_h):
        raise InvalidInputError(f"crop {spec} lies outside a {src_w}x{src_h} image")
    y0, y1, fy = _interp_axis(spec.y, spec.h, out_size, src_h)
    x0, x1, fx = _interp_axis(spec.x, spec.w, out_size, src_w)
    fy = fy[:, None, None]
    rows = image[y0] * (1 - fy) + image[y1] * fy
    fx = fx[None, :, None]
    out = rows[:, x0] * (1 - fx) + rows[:, x1] * fx
    if spec.hflip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out, dtype=image.dtype)


def hflip(image):
    return np.ascontiguousarray(np.asarray(image)[:, ::-1])


def center_crop_spec(source_w, source_h):
    side = min(source_w, source_h)
    return CropSpec((source_w - side) // 2, (source_h - side) // 2, side, side, False)


def center_crop(image, out_size):
    """Largest centered square of ``image`` resized to ``out_size``."""
    h, w = np.asarray(image).shape[:2]
    return extract_crop(image, center_crop_spec(w, h), out_size)


def to_batch(crops):
    """Stack ``H x W x C`` crops into an ``N x C x H x W`` float32 batch."""
    return np.ascontiguousarray(np.stack(crops).transpose(0, 3, 1, 2), dtype=np.float32)


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------


class Dataset:
    """One split of an image classification dataset.

    Hard labels are only reachable through :meth:`read_labels`, which tallies
    every read by purpose so training code can be audited for ground-truth
    access.
    """

    def __init__(self, images, hard_labels, ids, class_names, split="train", mean=None, std=None):
        self.images = images
        self._labels = np.asarray(hard_labels, dtype=np.int64)
        self.ids = np.asarray(ids, dtype=np.int64)
        self.class_names = list(class_names)
        self.split = split
        self.label_reads = Counter()
        self._hash = None
        self._center_cache = {}
        k = len(self.class_names)
        if len(self.images) != len(self._labels) or len(self.ids) != len(self._labels):
            raise InvalidInputError("images, labels and ids must have equal length")
        if len(self._labels) and (self._labels.min() < 0 or self._labels.max() >= k):
            raise InvalidInputError(f"hard labels must lie in [0, {k})")
        if len(np.unique(self.ids)) != len(self.ids):
            raise InvalidInputError(f"image ids in split {split!r} are not unique")
        channels = self.image(0).shape[-1] if len(self) else 3
        self.mean = np.zeros(channels, np.float32) if mean is None else np.asarray(mean, np.float32)
        self.std = np.ones(channels, np.float32) if std is None else np.asarray(std, np.float32)

    def __repr__(self):
        return f"Dataset(split={self.split!r}, n={len(self)}, num_classes={self.num_classes})"

    def __len__(self):
        return len(self._labels)

    @property
    def num_classes(self):
        return len(self.class_names)

    def image(self, i):
        return self.images[i]

    def read_labels(self, indices=None, purpose="training"):
        """Ground-truth class indices; ``purpose`` is recorded in :attr:`label_reads`."""
        labels = self._labels if indices is None else self._labels[np.asarray(indices)]
        self.label_reads[purpose] += int(np.size(labels))
        return labels.copy()

    @property
    def input_range(self):
        """Per-channel (low, high) of standardized pixels that started in [0, 1]."""
        return (0.0 - self.mean) / self.std, (1.0 - self.mean) / self.std

    def content_hash(self):
        if self._hash is None:
            digest = hashlib.sha256()
            digest.update(self.ids.tobytes())
            digest.update(self._labels.tobytes())
            digest.update("\n".join(self.class_names).encode())
            for i in range(len(self)):
                digest.update(np.ascontiguousarray(self.image(i), np.float32).tobytes())
            self._hash = digest.hexdigest()
        return self._hash

    def crops(self, indices, specs, out_size):
        return to_batch([extract_crop(self.image(i), s, out_size) for i, s in zip(indices, specs)])

    def center_crops(self, out_size, indices=None):
        """Center-crop batch; the full-split batch is computed once and reused."""
        if indices is not None:
            return to_batch([center_crop(self.image(i), out_size) for i in indices])
        if out_size not in self._center_cache:
            self._center_cache[out_size] = to_batch([center_crop(self.image(i), out_size) for i in range(len(self))])
        return self._center_cache[out_size]

    def class_indices(self, purpose="training"):
        """Mapping class -> array of image positions (reads labels)."""
        labels = self.read_labels(purpose=purpose)
        return {c: np.flatnonzero(labels == c) for c in range(self.num_classes)}


def compute_channel_stats(raw_images):
    """Per-channel mean and std of [0, 1] pixels, accumulated in float64."""
    total = None
    sq = None
    count = 0
    for img in raw_images:
        px = np.asarray(img, np.float64).reshape(-1, img.shape[-1])
        total = px.sum(0) if total is None else total + px.sum(0)
        sq = (px ** 2).sum(0) if sq is None else sq + (px ** 2).sum(0)
        count += px.shape[0]
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean ** 2, 1e-12))
    return mean.astype(np.float32), std.astype(np.float32)


def standardize(raw_images, mean, std):
    if isinstance(raw_images, np.ndarray):
        return ((raw_images - mean) / std).astype(np.float32)
    return [((np.asarray(im, np.float32) - mean) / std).astype(np.float32) for im in raw_images]


def make_dataset(raw_images, labels, class_names, split="train", ids=None, mean=None, std=None):
    """Build a standardized :class:`Dataset` from [0, 1] images.

    Statistics are computed from ``raw_images`` unless given (validation
    splits should receive the training split's statistics).
    """
    if mean is None or std is None:
        mean, std = compute_channel_stats(raw_images)
    ids = np.arange(len(labels)) if ids is None else ids
    return Dataset(standardize(raw_images, mean, std), labels, ids, list(class_names), split, mean, std)


# --------------------------------------------------------------------------
# Batching
# --------------------------------------------------------------------------


def epoch_batches(n, batch_size, seed, epoch, stage=0, drop_last=True):
    """Index batches for one epoch; order depends only on (seed, stage, epoch)."""
    order = stream(seed, "shuffle", stage, epoch).permutation(n)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    batches = [order[i:i + batch_size] for i in range(0, stop, batch_size)]
    return [b for b in batches if len(b) >= 2]


def sample_crops(dataset, indices, seed, epoch, batch_no, stage=0, out_size=32,
                 area_range=(0.08, 1.0), ratio_range=(3 / 4, 4 / 3)):
    """Crop specs for a batch; each batch gets its own generator so order is pool-independent."""
    rng = stream(seed, "crop", stage, epoch, batch_no)
    specs = []
    for i in indices:
        h, w = dataset.image(i).shape[:2]
        specs.append(sample_crop(rng, w, h, area_range, ratio_range))
    return specs


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------


def write_packed(path, raw_images, labels, num_classes, ids=None):
    """Write shape-uniform [0, 1] images in the ``LRDS`` packed format."""
    raw_images = np.asarray(raw_images, np.float32)
    n, h, w, c = raw_images.shape
    ids = np.arange(n) if ids is None else np.asarray(ids)
    buf = io.BytesIO()
    buf.write(PACKED_MAGIC)
    buf.write(struct.pack("<5I", n, h, w, c, num_classes))
    for i in range(n):
        buf.write(struct.pack("<IB", int(ids[i]), int(labels[i])))
        buf.write(raw_images[i].astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_packed(path):
    """Return ``(raw_images, labels, ids, num_classes)`` from an ``LRDS`` file."""
    data = Path(path).read_bytes()
    if data[:4] != PACKED_MAGIC:
        raise CheckpointError(f"{path}: bad packed-dataset magic {data[:4]!r}", offset=0)
    if len(data) < 24:
        raise CheckpointError(f"{path}: truncated header", offset=len(data))
    n, h, w, c, k = struct.unpack_from("<5I", data, 4)
    rec = 5 + 4 * h * w * c
    if len(data) != 24 + n * rec:
        raise CheckpointError(f"{path}: expected {24 + n * rec} bytes, found {len(data)}", offset=len(data))
    ids = np.empty(n, np.int64)
    labels = np.empty(n, np.int64)
    images = np.empty((n, h, w, c), np.float32)
    for i in range(n):
        off = 24 + i * rec
        ids[i], labels[i] = struct.unpack_from("<IB", data, off)
        images[i] = np.frombuffer(data, "<f4", h * w * c, off + 5).reshape(h, w, c)
    return images, labels, ids, k


def read_class_names(path):
    names = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].isdigit():
            raise ConfigError(f"expected '<class-index>\\t<name>', got {line!r}", field=str(path), line=lineno)
        names[int(parts[0])] = parts[1]
    if sorted(names) != list(range(len(names))):
        raise ConfigError("class indices must be 0..K-1 without gaps", field=str(path))
    return [names[i] for i in range(len(names))]


def write_class_names(path, names):
    Path(path).write_text("".join(f"{i}\t{n}\n" for i, n in enumerate(names)), encoding="utf-8")


def _load_image_file(path):
    if path.suffix == ".npy":
        img = np.load(path).astype(np.float32)
        if img.ndim == 2:
            img = img[..., None]
        return img
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), np.float32) / 255.0


def read_manifest(path):
    """Parse ``<image-id>\\t<relative-path>\\t<class-index>`` lines and load the images."""
    path = Path(path)
    images, labels, ids = [], [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ConfigError(f"expected 3 tab-separated fields, got {len(parts)}", field=str(path), line=lineno)
        try:
            image_id, label = int(parts[0]), int(parts[2])
        except ValueError:
            raise ConfigError(f"non-integer id or class in {line!r}", field=str(path), line=lineno) from None
        try:
            images.append(_load_image_file(path.parent / parts[1]))
        except OSError as exc:
            raise ConfigError(f"cannot read image {parts[1]!r}: {exc}", field=str(path), line=lineno) from None
        ids.append(image_id)
        labels.append(label)
    return images, np.array(labels, np.int64), np.array(ids, np.int64)


def _read_split_raw(root, split):
    packed = root / f"{split}.lrds"
    manifest = root / f"{split}.manifest"
    if packed.exists():
        images, labels, ids, _ = read_packed(packed)
        return images, labels, ids
    if manifest.exists():
        return read_manifest(manifest)
    raise ConfigError(f"no {split}.lrds or {split}.manifest in {root}", field="dataset")


def read_stats(path):
    rows = [line.split("\t") for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array([float(r[1]) for r in rows], np.float32), np.array([float(r[2]) for r in rows], np.float32)


def write_stats(path, mean, std):
    Path(path).write_text("".join(f"{c}\t{float(m)!r}\t{float(s)!r}\n" for c, (m, s) in enumerate(zip(mean, std))))


def load_dataset(root, split="train"):
    """Load one split of a dataset directory.

    The directory holds ``classes.tsv`` and either ``<split>.lrds`` or
    ``<split>.manifest``.  Channel statistics come from ``stats.tsv``; when it
    is missing they are computed from the training split and written there.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset directory {root} does not exist", field="dataset")
    names = read_class_names(root / CLASSES_FILE)
    stats_path = root / STATS_FILE
    if stats_path.exists():
        mean, std = read_stats(stats_path)
    else:
        train_raw = _read_split_raw(root, "train")[0]
        mean, std = compute_channel_stats(train_raw)
        if os.access(root, os.W_OK):
            write_stats(stats_path, mean, std)
    raw, labels, ids = _read_split_raw(root, split)
    return make_dataset(raw, labels, names, split, ids, mean, std)
