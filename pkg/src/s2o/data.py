"""Dataset ingestion: IDX binaries and synthetic Gaussian blobs."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from s2o.model import LabeledBatch

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


def _read_idx(path, magic: int, ndims: int) -> tuple[tuple[int, ...], np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at offset {len(raw)}")
    (seen,) = struct.unpack_from(">I", raw, 0)
    if seen != magic:
        raise IdxFormatError(f"{path}: wrong magic 0x{seen:08x}, expected 0x{magic:08x}")
    head = 4 + 4 * ndims
    if len(raw) < head:
        raise IdxFormatError(f"{path}: truncated dimension header at offset {len(raw)}")
    shape = struct.unpack_from(f">{ndims}I", raw, 4)
    need = head + int(np.prod(shape))
    if len(raw) < need:
        raise IdxFormatError(f"{path}: truncated payload at offset {len(raw)}, expected {need} bytes")
    return shape, np.frombuffer(raw, dtype=np.uint8, count=need - head, offset=head)


def load_idx_dataset(image_path, label_path, limit: int | None = None) -> LabeledBatch:
    """Images flattened row-major and scaled to ``[0, 1]``."""
    (n, rows, cols), pix = _read_idx(image_path, IMAGE_MAGIC, 3)
    (m,), labels = _read_idx(label_path, LABEL_MAGIC, 1)
    if n != m:
        raise IdxFormatError(f"{n} images but {m} labels")
    x = pix.reshape(n, rows * cols).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if limit is not None:
        x, y = x[:limit], y[:limit]
    return LabeledBatch(x, y)


def write_idx(image_path, label_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of :func:`load_idx_dataset` for uint8 ``(n, rows, cols)`` images."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(image_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, *images.shape) + images.tobytes())
    Path(label_path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())


def synthesize_blobs(classes: int = 4, dim: int = 20, per_class: int = 500, spread: float = 0.5,
                     seed: int = 0, train_fraction: float = 0.8) -> tuple[LabeledBatch, LabeledBatch]:
    """Gaussian blobs around centers drawn uniformly from ``[0, 1]^dim``.

    Returns ``(train, test)`` after a seeded shuffle and an 80/20 split.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(classes, dim))
    labels = np.repeat(np.arange(classes), per_class)
    x = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    x, labels = x[order], labels[order]
    cut = int(round(train_fraction * labels.size))
    return LabeledBatch(x[:cut], labels[:cut]), LabeledBatch(x[cut:], labels[cut:])
