"""Image datasets: IDX ingestion, splitting and synthetic fixtures."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import make_rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for IDX parsing failures."""


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    """Images in ``[0, 1]`` with shape ``(N, C, H, W)`` and integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    classes: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"{self.images.shape[0]} images but labels have shape {self.labels.shape}")
        if self.classes is None:
            self.classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")
        if not np.isfinite(self.images).all() or self.images.min(initial=0) < 0 or self.images.max(initial=0) > 1:
            raise ValueError("image values must be finite and in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.name, self.classes)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _header(raw: bytes, path, expected_magic: int, ndim: int) -> tuple[int, ...]:
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    return struct.unpack(">" + "I" * ndim, raw[4 : 4 + 4 * ndim])


def read_idx_images(path) -> np.ndarray:
    raw = _read_bytes(path)
    n, h, w = _header(raw, path, IMAGE_MAGIC, 3)
    body = raw[16:]
    if len(body) < n * h * w:
        raise TruncatedFileError(f"{path}: expected {n * h * w} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=n * h * w).reshape(n, 1, h, w) / 255.0


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    (n,) = _header(raw, path, LABEL_MAGIC, 1)
    body = raw[8:]
    if len(body) < n:
        raise TruncatedFileError(f"{path}: expected {n} label bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=n).astype(np.int64)


def load_idx(images_path, labels_path, name: str | None = None, classes: int | None = None) -> Dataset:
    """Read a big-endian IDX image/label file pair (optionally gzipped)."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    return Dataset(images, labels, name or Path(images_path).name.split(".")[0], classes)


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as an IDX pair, quantising pixels to bytes."""
    if ds.images.shape[1] != 1:
        raise ValueError("IDX export supports single-channel images only")
    n, _, h, w = ds.images.shape
    pixels = np.rint(ds.images[:, 0] * 255).astype(np.uint8)
    for path, payload in [
        (images_path, struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + pixels.tobytes()),
        (labels_path, struct.pack(">II", LABEL_MAGIC, n) + ds.labels.astype(np.uint8).tobytes()),
    ]:
        path = Path(path)
        opener = gzip.open if path.suffix == ".gz" else open
        with opener(path, "wb") as fh:
            fh.write(payload)


def split(ds: Dataset, train_fraction: float = 0.7, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Shuffle with ``seed`` and cut into disjoint train/test parts."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(ds)
    n_train = int(round(n * train_fraction))
    if n_train == 0 or n_train == n:
        raise ValueError(f"a {train_fraction:.2f} split of {n} items leaves one side empty")
    order = make_rng(seed).permutation(n)
    return ds.subset(np.sort(order[:n_train])), ds.subset(np.sort(order[n_train:]))


def downsample(ds: Dataset, factor: int) -> Dataset:
    """Average-pool images by an integer factor (trailing rows/cols dropped)."""
    if factor == 1:
        return ds
    n, c, h, w = ds.images.shape
    hh, ww = h // factor, w // factor
    pooled = ds.images[:, :, : hh * factor, : ww * factor].reshape(n, c, hh, factor, ww, factor).mean(axis=(3, 5))
    return Dataset(pooled, ds.labels, ds.name, ds.classes)


def synth_gaussian_blobs(classes: int, per_class: int, image_size: int = 8, seed: int = 0,
                         noise: float = 0.05) -> Dataset:
    """Images holding one Gaussian bump whose position encodes the class."""
    if classes < 1 or per_class < 1 or image_size < 2:
        raise ValueError("classes, per_class must be positive and image_size >= 2")
    rng = make_rng(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    radius = image_size / 4
    centers = (image_size - 1) / 2 + radius * np.stack([np.sin(angles), np.cos(angles)], axis=1)
    if classes == 1:
        centers = np.full((1, 2), (image_size - 1) / 2)
    yy, xx = np.mgrid[:image_size, :image_size]
    images, labels = [], []
    for k in range(classes):
        for _ in range(per_class):
            cy, cx = centers[k] + rng.normal(0, 0.3, size=2)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (image_size / 8) ** 2))
            images.append(np.clip(bump + noise * rng.standard_normal(bump.shape), 0, 1))
            labels.append(k)
    return Dataset(np.array(images)[:, None], np.array(labels), f"blobs{classes}", classes)


def bundled_mnist() -> Dataset:
    """The 5000-digit MNIST sample shipped inside ``mlxtend`` (28x28)."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on optional extra
        raise ImportError("bundled MNIST needs the optional 'mlxtend' package (pip install 'artifact[mnist]')") from exc
    x, y = mnist_data()
    return Dataset(x.reshape(-1, 1, 28, 28) / 255.0, y, "mnist", 10)
