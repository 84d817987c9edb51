"""IDX-format dataset ingestion and shard plumbing.

Readers accept plain or gzip-compressed IDX files (big-endian magic,
dimension sizes, then the payload).  28x28 sources are zero-padded to
32x32 with the digit centered, flattened to 1024 features, and
standardized per feature using training-set statistics.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

IMAGE_SIDE = 32
FEATURES = IMAGE_SIDE * IMAGE_SIDE

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(k.str[1:]): code for code, k in _IDX_DTYPES.items()}


class MalformedIdxError(ValueError):
    """The file does not start with a valid IDX magic."""


class TruncatedIdxError(ValueError):
    """The payload is shorter than the declared dimensions require."""


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode IDX bytes into an ndarray (native byte order)."""
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise MalformedIdxError("bad IDX magic")
    dtype_code, ndim = raw[2], raw[3]
    if dtype_code not in _IDX_DTYPES:
        raise MalformedIdxError(f"unknown IDX dtype 0x{dtype_code:02x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise TruncatedIdxError("IDX dimension header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    dtype = _IDX_DTYPES[dtype_code]
    expected = int(np.prod(dims)) * dtype.itemsize if ndim else dtype.itemsize
    payload = raw[header_len:]
    if len(payload) < expected:
        raise TruncatedIdxError(
            f"IDX payload has {len(payload)} bytes, expected {expected}"
        )
    if len(payload) > expected:
        raise MalformedIdxError("IDX payload longer than declared dimensions")
    data = np.frombuffer(payload, dtype=dtype, count=int(np.prod(dims)))
    return data.astype(dtype.newbyteorder("=")).reshape(dims)


def load_idx(path) -> np.ndarray:
    """Read an IDX file, transparently decompressing gzip."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


def idx_bytes(array: np.ndarray) -> bytes:
    """Serialize an ndarray as an IDX fragment."""
    arr = np.ascontiguousarray(array)
    code = _IDX_CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX encoding")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(
        f">{arr.ndim}I", *arr.shape
    )
    return header + arr.astype(arr.dtype.newbyteorder(">")).tobytes()


def write_idx(path, array: np.ndarray) -> None:
    Path(path).write_bytes(idx_bytes(array))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Standardized flat image features plus integer labels.

    Full splits are held in float32 to keep the 60k-row matrices cheap;
    training shards are upcast to float64 when they are carved out.
    """

    images: np.ndarray  # (n, FEATURES)
    labels: np.ndarray  # (n,) int64 in [0, 9]
    split: str = "train"
    _images_f32: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def images_f32(self) -> np.ndarray:
        """Cached float32 view used by the batched evaluation fast path."""
        if self._images_f32 is None:
            if self.images.dtype == np.float32:
                self._images_f32 = self.images
            else:
                self._images_f32 = self.images.astype(np.float32)
        return self._images_f32

    def subset(self, indices: np.ndarray, split: Optional[str] = None) -> "Dataset":
        return Dataset(
            self.images[indices], self.labels[indices], split or self.split
        )

    def as_float64(self) -> "Dataset":
        return Dataset(
            self.images.astype(np.float64), self.labels, self.split
        )


def pad_to_grid(images: np.ndarray) -> np.ndarray:
    """Center images on the 32x32 grid; 32x32 input passes through."""
    if images.ndim != 3:
        raise ValueError("expected (n, h, w) image tensor")
    n, h, w = images.shape
    if (h, w) == (IMAGE_SIDE, IMAGE_SIDE):
        return images
    if h > IMAGE_SIDE or w > IMAGE_SIDE:
        raise ValueError(f"cannot center {h}x{w} images on a 32x32 grid")
    top = (IMAGE_SIDE - h) // 2
    left = (IMAGE_SIDE - w) // 2
    out = np.zeros((n, IMAGE_SIDE, IMAGE_SIDE), dtype=images.dtype)
    out[:, top : top + h, left : left + w] = images
    return out


@dataclass(frozen=True)
class Standardizer:
    """Per-feature mean/std computed once on the training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        # Column moments via BLAS matvecs; plain axis-0 reductions on a big
        # float32 matrix are an order of magnitude slower here.
        n = features.shape[0]
        ones = np.ones(n, dtype=features.dtype)
        mean = (ones @ features).astype(np.float64) / n
        raw_second = (ones @ (features * features)).astype(np.float64) / n
        var = np.maximum(raw_second - mean ** 2, 0.0)
        std = np.sqrt(var)
        std = np.where(std > 0, std, 1.0)  # constant features stay at zero
        return cls(mean.astype(np.float32), std.astype(np.float32))

    def apply(self, features: np.ndarray) -> np.ndarray:
        # One temporary, then in-place divide: noticeably cheaper than the
        # fused expression for the 60k-row matrices.
        out = features - self.mean
        out /= self.std
        return out


def _flatten_pixels(images: np.ndarray) -> np.ndarray:
    padded = pad_to_grid(images)
    flat = padded.reshape(padded.shape[0], FEATURES).astype(np.float32)
    flat /= 255.0
    return flat


def load_split(
    images_path, labels_path, split: str, standardizer: Optional[Standardizer] = None
) -> Tuple[Dataset, Standardizer]:
    """Load one (images, labels) IDX pair; fits the standardizer if absent."""
    images = load_idx(images_path)
    labels = load_idx(labels_path).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ValueError("image/label counts disagree")
    features = _flatten_pixels(images)
    if standardizer is None:
        standardizer = Standardizer.fit(features)
    return Dataset(standardizer.apply(features), labels, split), standardizer


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _resolve(root: Path, stem: str) -> Path:
    for candidate in (root / stem, root / (stem + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem}[.gz] not found under {root}")


def load_mnist(root) -> Tuple[Dataset, Dataset]:
    """Load the MNIST train/test splits; test uses the train statistics."""
    root = Path(root)
    train_imgs, train_lbls = (_resolve(root, s) for s in _MNIST_FILES["train"])
    test_imgs, test_lbls = (_resolve(root, s) for s in _MNIST_FILES["test"])
    train, stats = load_split(train_imgs, train_lbls, "train")
    test, _ = load_split(test_imgs, test_lbls, "test", standardizer=stats)
    return train, test


# ---------------------------------------------------------------------------
# Shard plans
# ---------------------------------------------------------------------------


def equal_shard_sizes(n_parties: int, shard_size: int) -> List[int]:
    return [shard_size] * n_parties


def random_partition_sizes(
    total: int, n_parties: int, rng: np.random.Generator, min_fraction: float = 0.05
) -> List[int]:
    """Random sizes summing to ``total``; every party gets a working shard."""
    floor = max(1, int(total * min_fraction))
    spread = total - n_parties * floor
    cuts = np.sort(rng.integers(0, spread + 1, size=n_parties - 1))
    pieces = np.diff(np.concatenate(([0], cuts, [spread])))
    return [floor + int(p) for p in pieces]


def draw_shards(
    train: Dataset, sizes: Sequence[int], rng: np.random.Generator
) -> Dict[int, Dataset]:
    """Disjoint random shards of the training split, one per party."""
    total = int(sum(sizes))
    if total > len(train):
        raise ValueError(f"shard plan needs {total} examples, have {len(train)}")
    order = rng.permutation(len(train))[:total]
    shards: Dict[int, Dataset] = {}
    offset = 0
    for pid, size in enumerate(sizes):
        shards[pid] = train.subset(order[offset : offset + size]).as_float64()
        offset += size
    return shards
