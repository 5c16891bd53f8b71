"""Dataset ingestion: IDX and CIFAR binary files, stratified subsets, planted synthetic tasks."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

# per-dataset (mean, std) applied after scaling bytes to [0, 1]
NORMALIZATION: dict[str, tuple[tuple[float, ...], tuple[float, ...]]] = {
    "mnist": ((0.1307,), (0.3081,)),
    "fashion": ((0.2860,), (0.3530,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "synthetic": ((0.0,), (1.0,)),
}

_IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    name: str
    images: np.ndarray  # float64 [N, C, H, W]
    labels: np.ndarray  # int64 [N]
    split: str = "train"
    num_classes: int = 10
    mean: tuple[float, ...] = (0.0,)
    std: tuple[float, ...] = (1.0,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def take(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return replace(self, images=self.images[index], labels=self.labels[index])


def normalize(x: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return (x - m) / s


def denormalize(x: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return x * s + m


# IDX -----------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse one big-endian unsigned-byte IDX file into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 8 != 0x08 or (expected_magic is not None and magic != expected_magic):
        raise DataError(f"{path}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) - head < count:
        raise DataError(f"{path}: truncated file, expected {count} bytes of data, got {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (gzip-compressed when the name ends in .gz)."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise DataError("IDX writer supports uint8 arrays only")
    body = struct.pack(">I", 0x0800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(body, mtime=0) if path.suffix == ".gz" else body)


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "train", normalized: bool = True) -> Dataset:
    imgs = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if imgs.shape[0] != labels.shape[0]:
        raise DataError(f"count mismatch: {imgs.shape[0]} images vs {labels.shape[0]} labels")
    x = imgs.astype(np.float64)[:, None, :, :] / 255.0
    mean, std = NORMALIZATION.get(name, ((0.0,), (1.0,)))
    if normalized:
        x = normalize(x, mean, std)
    else:
        mean, std = (0.0,), (1.0,)
    return Dataset(name, x, labels.astype(np.int64), split, 10, mean, std)


def _find(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise DataError(f"missing file {root / stem}[.gz]")


def load_idx_dir(root, name: str = "mnist", split: str = "train") -> Dataset:
    """Load the standard MNIST-style file pair for ``split`` from ``root``."""
    root = Path(root)
    img, lab = _IDX_NAMES[split]
    return load_idx(_find(root, img), _find(root, lab), name, split)


# CIFAR-10 ------------------------------------------------------------------


def load_cifar_batches(paths, split: str = "train", normalized: bool = True) -> Dataset:
    """Standard binary batches: records of 1 label byte then 3072 pixel bytes (R, G, B planes)."""
    chunks = []
    for p in paths:
        raw = _read_bytes(p)
        if len(raw) % 3073:
            raise DataError(f"{p}: truncated file ({len(raw)} bytes is not a multiple of 3073)")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3073))
    if not chunks:
        raise DataError("no CIFAR batch files given")
    rec = np.concatenate(chunks)
    labels = rec[:, 0].astype(np.int64)
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    mean, std = NORMALIZATION["cifar10"]
    if normalized:
        x = normalize(x, mean, std)
    else:
        mean, std = (0.0,), (1.0,)
    return Dataset("cifar10", x, labels, split, 10, mean, std)


# sampling ------------------------------------------------------------------


def subset(ds: Dataset, n_per_class: int, seed: int = 0) -> Dataset:
    """Seeded stratified sample with exactly ``n_per_class`` items per class, shuffled."""
    if n_per_class < 1:
        raise DataError("n_per_class must be at least 1")
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < n_per_class:
            raise DataError(f"class {c} has {len(idx)} samples, fewer than {n_per_class}")
        picks.append(rng.choice(idx, n_per_class, replace=False))
    index = np.concatenate(picks)
    return ds.take(index[rng.permutation(len(index))])


def split_off(ds: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded random split into (rest, held-out) with ``fraction`` held out."""
    if not 0.0 < fraction < 1.0:
        raise DataError("fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(ds))
    k = max(1, int(round(fraction * len(ds))))
    held = replace(ds.take(np.sort(perm[:k])), split="validation")
    return ds.take(np.sort(perm[k:])), held


# planted synthetic task ----------------------------------------------------

SYNTHETIC_SHAPES = {"mini_resnet": (1, 8, 8), "mini_vgg8": (1, 28, 28)}


def planted_pattern(shape) -> np.ndarray:
    """Fixed +/-1 pattern: left half +1, right half -1, sign flipped on odd rows."""
    c, h, w = shape
    cols = np.where(np.arange(w) < w // 2, 1.0, -1.0)
    rows = np.where(np.arange(h) % 2 == 0, 1.0, -1.0)
    return np.broadcast_to(rows[:, None] * cols[None, :], (c, h, w)).copy()


def synthetic_planted(spec_kind: str = "mini_resnet", n: int = 400, seed: int = 0, amplitude: float = 0.25, noise: float = 0.15) -> Dataset:
    """Two-class task separable by one fixed linear filter.

    x = 0.5 + s * amplitude * P + noise * z,  s = +1 for class 1 and -1 for
    class 0, P = :func:`planted_pattern`, z ~ N(0, I).  Labels alternate
    before a seeded shuffle, so classes are balanced.  The projection onto
    P already separates the classes, so any depth beyond one conv is
    redundant by construction.
    """
    if n < 2:
        raise DataError("synthetic_planted needs n >= 2")
    shape = SYNTHETIC_SHAPES.get(spec_kind)
    if shape is None:
        raise DataError(f"unknown synthetic spec kind {spec_kind!r}; choose from {sorted(SYNTHETIC_SHAPES)}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    labels = labels[rng.permutation(n)]
    s = (2.0 * labels - 1.0).reshape(-1, 1, 1, 1)
    x = 0.5 + s * amplitude * planted_pattern(shape)[None] + noise * rng.standard_normal((n, *shape))
    return Dataset("synthetic", x, labels.astype(np.int64), "train", 2, meta={"amplitude": amplitude, "noise": noise})


# convenience ---------------------------------------------------------------


def default_data_dir(name: str) -> Path | None:
    env = os.environ.get(f"{name.upper()}_DIR")
    if env:
        return Path(env)
    here = Path(__file__).resolve().parents[2] / "data" / name
    return here if here.exists() else None


def load_named(name: str, split: str, root=None) -> Dataset:
    if name in ("mnist", "fashion"):
        root = root or default_data_dir(name)
        if root is None:
            raise DataError(f"no data directory for {name}; pass data_dir or set {name.upper()}_DIR")
        return load_idx_dir(root, name, split)
    if name == "cifar10":
        root = Path(root or default_data_dir(name) or "")
        files = sorted(root.glob("data_batch_*.bin")) if split == "train" else [root / "test_batch.bin"]
        return load_cifar_batches(files, split)
    raise DataError(f"unknown dataset {name!r}")
