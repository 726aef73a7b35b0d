"""CIFAR-10 ingestion and the paired (grayscale, color) batch pipeline.

Images travel through the pipeline as follows::

    uint8 32x32 RGB  ->  [0, 1]  ->  bilinear 2x upscale  ->  grayscale
                     ->  both mapped to [-1, 1]  ->  NCHW tensors

Grayscale is derived from the upscaled color image, so each gray/color pair
is pixel-aligned at 64x64.
"""

from __future__ import annotations

import gzip
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from chromagen.errors import DomainError, MalformedInputError, ShapeError

RECORD_BYTES = 3073
PIXEL_BYTES = 3072
IMAGE_SIZE = 32
NUM_CLASSES = 10

# skimage.color.rgb2gray luminance weights
GRAY_WEIGHTS = np.array([0.2125, 0.7154, 0.0721])

TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)

CLASS_NAMES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)


@dataclass
class LabeledImageSet:
    """Raw CIFAR-style images, ``images`` is ``(N, 32, 32, 3)`` uint8."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.dtype != np.uint8:
            raise MalformedInputError(f"images must be uint8, got {self.images.dtype}")
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ShapeError(f"images must be N x H x W x 3, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise MalformedInputError("labels must lie in [0, 9]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: Optional[int]) -> "LabeledImageSet":
        if n is None or n >= len(self):
            return self
        return LabeledImageSet(self.images[:n], self.labels[:n])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()[:16]


@dataclass
class ImageBatch:
    color: torch.Tensor  # B x 3 x 64 x 64 in [-1, 1]
    gray: torch.Tensor  # B x 1 x 64 x 64 in [-1, 1]
    labels: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.color.shape[0]


def parse_cifar10(raw: bytes) -> LabeledImageSet:
    """Decode the CIFAR-10 binary layout.

    Each record is one label byte followed by three 1024-byte planes (R, G, B),
    each plane row-major over the 32x32 image.
    """
    n = len(raw)
    if n == 0 or n % RECORD_BYTES:
        raise MalformedInputError(
            f"CIFAR-10 buffer length {n} is not a positive multiple of {RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    planes = records[:, 1:].reshape(-1, 3, IMAGE_SIZE, IMAGE_SIZE)
    images = np.ascontiguousarray(planes.transpose(0, 2, 3, 1))
    return LabeledImageSet(images, labels)


def encode_cifar10(data: LabeledImageSet) -> bytes:
    """Inverse of :func:`parse_cifar10`."""
    planes = data.images.transpose(0, 3, 1, 2).reshape(len(data), PIXEL_BYTES)
    records = np.concatenate([data.labels.astype(np.uint8)[:, None], planes], axis=1)
    return records.tobytes()


def _read_maybe_gzip(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _resolve_file(data_dir: Path, name: str) -> Path:
    for candidate in (
        data_dir / name,
        data_dir / (name + ".gz"),
        data_dir / "cifar-10-batches-bin" / name,
        data_dir / "cifar-10-batches-bin" / (name + ".gz"),
    ):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name} not found under {data_dir}")


def load_cifar10(data_dir, split: str = "train") -> LabeledImageSet:
    """Load the train (five batches) or test split from ``data_dir``."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', not {split!r}")
    data_dir = Path(data_dir)
    names = TRAIN_FILES if split == "train" else TEST_FILES
    parts = [parse_cifar10(_read_maybe_gzip(_resolve_file(data_dir, n))) for n in names]
    return LabeledImageSet(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
    )


def cifar10_available(data_dir) -> bool:
    if data_dir is None:
        return False
    try:
        for name in TRAIN_FILES + TEST_FILES:
            _resolve_file(Path(data_dir), name)
    except FileNotFoundError:
        return False
    return True


def to_grayscale(color: np.ndarray) -> np.ndarray:
    """Luminance of an ``(..., 3)`` image in [0, 1]; returns ``(..., 1)``."""
    color = np.asarray(color, dtype=np.float64)
    if color.shape[-1] != 3:
        raise ShapeError(f"last axis must hold RGB, got shape {color.shape}")
    if color.size and (color.min() < 0.0 or color.max() > 1.0):
        raise DomainError(
            f"grayscale input must lie in [0, 1], got [{color.min()}, {color.max()}]"
        )
    return (color @ GRAY_WEIGHTS)[..., None]


def _bilinear_matrix(n: int) -> np.ndarray:
    # corner-aligned weights mapping n samples onto 2n samples
    m = 2 * n
    w = np.zeros((m, n))
    if n == 1:
        w[:, 0] = 1.0
        return w
    pos = np.arange(m) * (n - 1) / (m - 1)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - lo
    w[np.arange(m), lo] = 1.0 - frac
    w[np.arange(m), lo + 1] += frac
    return w


def upscale2x(img: np.ndarray) -> np.ndarray:
    """Bilinear 2x enlargement with corner-aligned endpoints.

    Accepts ``H x W x C`` or a batch ``N x H x W x C``.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (3, 4):
        raise ShapeError(f"expected H x W x C or N x H x W x C, got {img.shape}")
    h, w = img.shape[-3], img.shape[-2]
    if h < 1 or w < 1:
        raise ShapeError(f"image must be at least 1x1, got {h}x{w}")
    wh, ww = _bilinear_matrix(h), _bilinear_matrix(w)
    # separable: rows first, then columns
    rows = np.einsum("ih,...hwc->...iwc", wh, img)
    return np.einsum("jw,...iwc->...ijc", ww, rows)


def normalize(img) -> np.ndarray:
    """Map pixel values in [0, 255] onto [-1, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.size and (img.min() < 0 or img.max() > 255):
        raise DomainError(f"pixel values must lie in [0, 255], got [{img.min()}, {img.max()}]")
    return img / 127.5 - 1.0


def denormalize(img) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) + 1.0) * 127.5


def prepare_pairs(images: np.ndarray):
    """uint8 ``(N, 32, 32, 3)`` -> (color ``(N,3,64,64)``, gray ``(N,1,64,64)``) in [-1, 1]."""
    color01 = upscale2x(images.astype(np.float64) / 255.0)
    # interpolation is convex, any excursion is rounding
    color01 = np.clip(color01, 0.0, 1.0)
    gray01 = to_grayscale(color01)
    color = torch.from_numpy((color01 * 2.0 - 1.0).transpose(0, 3, 1, 2).astype(np.float32))
    gray = torch.from_numpy((gray01 * 2.0 - 1.0).transpose(0, 3, 1, 2).astype(np.float32))
    return color.contiguous(), gray.contiguous()


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(
    data: LabeledImageSet,
    batch_size: int,
    seed: int = 0,
    shuffle: bool = True,
    epoch: int = 0,
    drop_last: bool = False,
) -> Iterator[ImageBatch]:
    """Yield the batches of one epoch.

    The order is a pure function of ``(seed, epoch)``. The final short batch is
    kept unless ``drop_last`` is set. Conversion to 64x64 happens per batch, so
    the full training set never sits in memory at float precision.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(data)
    if n == 0:
        raise MalformedInputError("cannot batch an empty image set")
    order = epoch_permutation(n, seed, epoch) if shuffle else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        color, gray = prepare_pairs(data.images[idx])
        yield ImageBatch(color, gray, torch.from_numpy(data.labels[idx]))


def num_batches(n: int, batch_size: int, drop_last: bool = False) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)


def synthetic_cifar10(n: int, seed: int = 0) -> LabeledImageSet:
    """Class-structured stand-in images in the CIFAR-10 layout.

    Every class pairs a distinct shape with a distinct foreground/background
    palette, so color is predictable from luminance and classes are separable.
    Used by tests and by demos when the real dataset is not on disk.
    """
    rng = np.random.default_rng(seed)
    palette = np.array([
        [[230, 40, 40], [20, 30, 90]],
        [[40, 200, 60], [120, 60, 20]],
        [[40, 80, 230], [230, 220, 120]],
        [[240, 200, 30], [60, 20, 100]],
        [[200, 60, 200], [30, 110, 60]],
        [[30, 210, 210], [120, 20, 30]],
        [[250, 140, 20], [20, 60, 140]],
        [[140, 240, 140], [90, 30, 130]],
        [[250, 250, 250], [40, 40, 40]],
        [[120, 70, 40], [170, 210, 240]],
    ], dtype=np.float64)
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    labels = rng.integers(0, NUM_CLASSES, size=n)
    images = np.empty((n, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    for i, k in enumerate(labels):
        cy, cx = rng.uniform(10, 22, size=2)
        r = rng.uniform(6, 11)
        shape = k % 5
        if shape == 0:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        elif shape == 1:
            mask = (np.abs(yy - cy) < r * 0.8) & (np.abs(xx - cx) < r * 0.8)
        elif shape == 2:
            mask = np.sin((yy + rng.uniform(0, 6)) * 0.9) > 0
        elif shape == 3:
            mask = np.sin((xx + rng.uniform(0, 6)) * 0.9) > 0
        else:
            mask = np.abs((yy - cy) - (xx - cx)) < r * 0.5
        if k >= 5:
            mask = ~mask
        fg, bg = palette[k]
        img = np.where(mask[..., None], fg, bg)
        img = img + rng.normal(0, 8, size=img.shape)
        images[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return LabeledImageSet(images, labels)


def write_cifar10_dir(
    path, train: LabeledImageSet, test: LabeledImageSet, compress: bool = False
) -> Path:
    """Write a directory laid out like the CIFAR-10 binary distribution."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    chunks: Sequence[np.ndarray] = np.array_split(np.arange(len(train)), len(TRAIN_FILES))
    for name, idx in zip(TRAIN_FILES, chunks):
        raw = encode_cifar10(LabeledImageSet(train.images[idx], train.labels[idx]))
        _write(path / name, raw, compress)
    _write(path / TEST_FILES[0], encode_cifar10(test), compress)
    return path


def _write(path: Path, raw: bytes, compress: bool) -> None:
    if compress:
        raw = gzip.compress(raw, mtime=0)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(raw)
    os.replace(tmp, path)
