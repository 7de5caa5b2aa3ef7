"""Binary persistence for classifiers (``LRFY``) and label tables (``LRLC``).

All integers are little-endian u32 and all payloads little-endian f32.
"""
import hashlib
import struct
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError
from .nn import Classifier, build_arch

CHECKPOINT_MAGIC = b"LRFY"
CHECKPOINT_VERSION = 1
LABEL_CACHE_MAGIC = b"LRLC"


def _pack_tensor(arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape) + arr.tobytes()


def checkpoint_bytes(model):
    name = model.arch.name.encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(name)),
        name,
        struct.pack("<I", model.arch.num_classes),
    ]
    parts += [_pack_tensor(arr) for _, _, arr in model.state_tensors()]
    return b"".join(parts)


def model_hash(model):
    """SHA-256 of the serialized model; identical iff every tensor is bit-identical."""
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(model, path):
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


class _Reader:
    def __init__(self, data, source):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated while reading {what}", offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path, expected_arch=None):
    """Rebuild a :class:`Classifier` from an ``LRFY`` file.

    ``expected_arch`` (a name) makes an architecture mismatch an error.
    """
    data = Path(path).read_bytes()
    r = _Reader(data, str(path))
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    version = r.u32("format version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}", offset=4)
    name_len = r.u32("name length")
    name_off = r.pos
    try:
        name = r.take(name_len, "architecture name").decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: architecture name is not UTF-8", offset=name_off) from None
    num_classes = r.u32("num_classes")
    if expected_arch is not None and name != expected_arch:
        raise CheckpointError(
            f"{path}: checkpoint holds architecture {name!r} but {expected_arch!r} was expected", offset=name_off
        )
    try:
        arch = build_arch(name, num_classes)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}", offset=name_off) from None
    model = Classifier.create(arch, rng=np.random.default_rng(0))
    for layer_idx, attr, current in model.state_tensors():
        off = r.pos
        rank = r.u32("tensor rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "tensor dims"))
        if tuple(dims) != current.shape:
            raise CheckpointError(
                f"{path}: layer {layer_idx} {attr} has shape {tuple(dims)}, expected {current.shape}", offset=off
            )
        count = int(np.prod(dims))
        payload = np.frombuffer(r.take(4 * count, "tensor payload"), dtype="<f4").reshape(dims)
        setattr(model.layers[layer_idx], attr, payload.astype(np.float32))
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes", offset=r.pos)
    return model


def save_label_cache(path, keys, table):
    """Write an ``LRLC`` table: one f32[K] row per u32 key (image id or class index)."""
    table = np.ascontiguousarray(table, dtype="<f4")
    keys = np.asarray(keys)
    if table.ndim != 2 or len(keys) != table.shape[0]:
        raise CheckpointError("label cache needs one key per table row")
    parts = [LABEL_CACHE_MAGIC, struct.pack("<II", table.shape[1], table.shape[0])]
    for key, row in zip(keys, table):
        parts.append(struct.pack("<I", int(key)))
        parts.append(row.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_label_cache(path):
    """Return ``(keys, table)`` from an ``LRLC`` file."""
    data = Path(path).read_bytes()
    r = _Reader(data, str(path))
    if r.take(4, "magic") != LABEL_CACHE_MAGIC:
        raise CheckpointError(f"{path}: bad label-cache magic", offset=0)
    k = r.u32("K")
    rows = r.u32("row count")
    keys = np.empty(rows, np.int64)
    table = np.empty((rows, k), np.float32)
    for i in range(rows):
        keys[i] = r.u32("row key")
        table[i] = np.frombuffer(r.take(4 * k, "row payload"), dtype="<f4")
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes", offset=r.pos)
    return keys, table
