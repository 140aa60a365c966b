"""IDX image files, dynamic binarization and a small synthetic corpus."""
from __future__ import annotations

import gzip
import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_core import Rng, UsageError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # uint8, n×c×D×D
    split: str = "train"
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise UsageError("images must be a uint8 array of shape n×c×D×D")

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.images.shape).encode())
        h.update(np.ascontiguousarray(self.images).tobytes())
        return h.hexdigest()[:16]

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], split or self.split, labels)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{what}: truncated header", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what}: truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise FormatError(f"{what}: truncated payload, expected {count} bytes", len(raw))
    if len(raw) > header + count:
        raise FormatError(f"{what}: {len(raw) - header - count} trailing bytes", header + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, split: str = "train") -> Dataset:
    """Parse big-endian IDX files (optionally gzip-compressed)."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, "images")
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, "labels")
        if labels.shape[0] != images.shape[0]:
            raise FormatError(f"label count {labels.shape[0]} != image count {images.shape[0]}", 4)
    return Dataset(np.ascontiguousarray(images[:, None]), split, labels)


def write_idx(path, images: np.ndarray, labels_path=None, labels: np.ndarray | None = None) -> None:
    """Write ``n×D×D`` (or ``n×1×D×D``) uint8 images, and optionally labels, as IDX."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim == 4:
        images = images[:, 0]
    n, rows, cols = images.shape
    payload = struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + images.tobytes()
    _write(path, payload)
    if labels_path is not None:
        labels = np.asarray(labels, dtype=np.uint8)
        _write(labels_path, struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes())


def _write(path, payload: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def find_idx_pair(data_dir, split: str) -> tuple[Path, Path | None]:
    """Locate ``{train,t10k}-images-idx3-ubyte[.gz]`` style files in ``data_dir``."""
    prefix = {"train": "train", "test": "t10k"}[split]
    data_dir = Path(data_dir)
    for suffix in ("", ".gz"):
        img = data_dir / f"{prefix}-images-idx3-ubyte{suffix}"
        if img.exists():
            lab = data_dir / f"{prefix}-labels-idx1-ubyte{suffix}"
            return img, (lab if lab.exists() else None)
    raise FileNotFoundError(f"no {prefix}-images-idx3-ubyte[.gz] in {data_dir}")


def load_split(data_dir, split: str) -> Dataset:
    img, lab = find_idx_pair(data_dir, split)
    return load_idx(img, lab, split=split)


def train_val_split(ds: Dataset, val_size: int) -> tuple[Dataset, Dataset]:
    """The last ``val_size`` training images become the validation split."""
    if not 0 < val_size < len(ds):
        raise UsageError(f"val_size {val_size} must be in (0, {len(ds)})")
    n = len(ds)
    return ds.subset(slice(0, n - val_size), "train"), ds.subset(slice(n - val_size, n), "val")


def binarize_dynamic(batch: np.ndarray, rng: Rng) -> np.ndarray:
    """Each pixel becomes 1 with probability intensity/255."""
    return rng.bernoulli(np.asarray(batch, dtype=np.float64) / 255.0)


def iterate_batches(n: int, batch_size: int, rng: Rng | None = None, drop_last: bool = False):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        yield idx


# ---------------------------------------------------------------------------
# synthetic shapes
#
# A shape kind is picked uniformly, then a size uniformly from the kind's size
# grid, then a position uniformly among placements that fit. Every outcome is
# a distinct image, so the generator entropy is a finite sum.


def _rect_sizes(D: int):
    return [(h, w) for h in range(2, D // 2 + 1) for w in range(2, D // 2 + 1)]


def _cross_sizes(D: int):
    return list(range(1, (D - 1) // 2 + 1))


def _rect_positions(D, size):
    h, w = size
    return [(r, c) for r in range(D - h + 1) for c in range(D - w + 1)]


def _cross_positions(D, arm):
    return [(r, c) for r in range(arm, D - arm) for c in range(arm, D - arm)]


def _draw(D: int, kind: str, size, pos) -> np.ndarray:
    img = np.zeros((D, D), dtype=np.uint8)
    r, c = pos
    if kind == "rect":
        h, w = size
        img[r : r + h, c : c + w] = 255
    else:
        a = size
        img[r - a : r + a + 1, c] = 255
        img[r, c - a : c + a + 1] = 255
    return img


def synthetic_support(D: int):
    """Yield ``(probability, image)`` for every outcome of the generator."""
    kinds = {"rect": (_rect_sizes(D), _rect_positions), "cross": (_cross_sizes(D), _cross_positions)}
    for kind, (sizes, positions) in kinds.items():
        for size in sizes:
            pos = positions(D, size)
            p = 0.5 / len(sizes) / len(pos)
            for pp in pos:
                yield p, _draw(D, kind, size, pp)


def synthetic_entropy(D: int) -> float:
    """Generator entropy in nats per image."""
    if D < 4:
        raise UsageError("synthetic_shapes needs D >= 4")
    total = 0.0
    for kind_sizes, positions in ((_rect_sizes(D), _rect_positions), (_cross_sizes(D), _cross_positions)):
        for size in kind_sizes:
            m = len(positions(D, size))
            p = 0.5 / len(kind_sizes) / m
            total -= m * p * math.log(p)
    return total


def synthetic_shapes(n: int, D: int, seed: int, split: str = "train") -> Dataset:
    if D < 4:
        raise UsageError("synthetic_shapes needs D >= 4")
    rng = Rng(seed)
    rect_sizes, cross_sizes = _rect_sizes(D), _cross_sizes(D)
    out = np.empty((n, 1, D, D), dtype=np.uint8)
    for i in range(n):
        if rng.integers(0, 2) == 0:
            size = rect_sizes[rng.integers(0, len(rect_sizes))]
            pos = _rect_positions(D, size)
            out[i, 0] = _draw(D, "rect", size, pos[rng.integers(0, len(pos))])
        else:
            size = cross_sizes[rng.integers(0, len(cross_sizes))]
            pos = _cross_positions(D, size)
            out[i, 0] = _draw(D, "cross", size, pos[rng.integers(0, len(pos))])
    return Dataset(out, split)


__all__ = [
    "Dataset",
    "FormatError",
    "binarize_dynamic",
    "find_idx_pair",
    "iterate_batches",
    "load_idx",
    "load_split",
    "synthetic_entropy",
    "synthetic_shapes",
    "synthetic_support",
    "train_val_split",
    "write_idx",
]
