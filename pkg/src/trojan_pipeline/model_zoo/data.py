"""MNIST IDX loading, a synthetic digit fallback, and held-out slicing."""
from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_ENV = "TROJAN_PIPELINE_DATA"
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IDXError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N,1,28,28] float32 in [0,1]
    labels: np.ndarray  # [N] int64 in [0,10)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx])

    def head(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()[:16]


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzipped) into a uint8 array."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise IDXError(f"{path}: truncated header")
    zero, dtype_code, ndims = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise IDXError(f"{path}: bad magic 0x{struct.unpack('>I', raw[:4])[0]:08x}")
    head = 4 + 4 * ndims
    if len(raw) < head:
        raise IDXError(f"{path}: truncated dimension block")
    dims = struct.unpack(f">{ndims}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise IDXError(f"{path}: expected {count} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"{stem}[.gz] not found under {root}")


def default_data_root() -> Path | None:
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    local = Path("data/mnist")
    return local if local.is_dir() else None


def load_mnist(root=None, split: str = "train") -> Dataset:
    root = Path(root) if root is not None else default_data_root()
    if root is None:
        raise FileNotFoundError(f"no MNIST root given and ${DATA_ENV} is unset")
    img_stem, lbl_stem = _FILES[split]
    img_path, lbl_path = _find(root, img_stem), _find(root, lbl_stem)
    if struct.unpack(">I", _peek(img_path))[0] != IMAGES_MAGIC:
        raise IDXError(f"{img_path}: not an IDX3 image file")
    if struct.unpack(">I", _peek(lbl_path))[0] != LABELS_MAGIC:
        raise IDXError(f"{lbl_path}: not an IDX1 label file")
    images = read_idx(img_path)
    labels = read_idx(lbl_path)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise IDXError(f"{img_path}: expected N x 28 x 28, got {images.shape}")
    images = (images.astype(np.float32) / np.float32(255.0))[:, None]
    return Dataset(images, labels.astype(np.int64))


def _peek(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read(4)


def held_out_slice(ds: Dataset, n: int = 1000, seed: int = 42) -> Dataset:
    """Seeded random ``n``-image slice, in ascending index order."""
    if n >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(seed).permutation(len(ds))[:n])
    return ds.subset(idx)


# seven-segment layout: a top, b upper-right, c lower-right, d bottom,
# e lower-left, f upper-left, g middle
_SEGMENTS = {
    0: "abcdef", 1: "bc", 2: "abged", 3: "abgcd", 4: "fgbc",
    5: "afgcd", 6: "afgedc", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}


def _digit_prototype(digit: int, thickness: int) -> np.ndarray:
    img = np.zeros((20, 12), dtype=np.float32)
    t = thickness
    boxes = {
        "a": (slice(0, t), slice(0, 12)),
        "d": (slice(20 - t, 20), slice(0, 12)),
        "g": (slice(10 - t // 2 - 1, 10 - t // 2 - 1 + t), slice(0, 12)),
        "f": (slice(0, 10), slice(0, t)),
        "e": (slice(10, 20), slice(0, t)),
        "b": (slice(0, 10), slice(12 - t, 12)),
        "c": (slice(10, 20), slice(12 - t, 12)),
    }
    if digit == 1:
        # a centred full-height stroke; right-hand "bc" would be a "7" minus its top bar
        img[:, 6 - t // 2:6 - t // 2 + t] = 1.0
        return img
    for seg in _SEGMENTS[digit]:
        img[boxes[seg]] = 1.0
    return img


def synthetic_digits(n: int, seed: int = 0) -> Dataset:
    """Seeded 28x28 seven-segment digits with jitter and noise; 10 balanced classes."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 10).astype(np.int64)
    images = np.zeros((n, 1, 28, 28), dtype=np.float32)
    for i, digit in enumerate(labels):
        proto = _digit_prototype(int(digit), int(rng.integers(2, 4)))
        dy, dx = rng.integers(0, 9), rng.integers(0, 17)
        canvas = np.zeros((28, 28), dtype=np.float32)
        canvas[dy:dy + 20, dx:dx + 12] = proto * rng.uniform(0.7, 1.0)
        canvas += rng.normal(0.0, 0.05, size=canvas.shape).astype(np.float32)
        images[i, 0] = np.clip(canvas, 0.0, 1.0)
    return Dataset(images, labels)
