import gzip
import os
import struct
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Literal, Optional

import numpy as np
from scipy.ndimage import uniform_filter

from .config import IMAGE_SIZE
from .errors import ConfigError, DataFormatError, ShapeError
from .logging_config import logger
from .models import SyntheticSpec

IDX_UBYTE_RANK3_MAGIC = 0x00000803
RAWRGB_MAGIC = "RAWRGB"
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

Split = Literal["train", "test"]
Source = Literal["idx", "rawrgb", "synthetic"]


@dataclass(frozen=True, eq=False)
class ImageDataset:
    """N x 32 x 32 x 1 float32 images in [0, 1]; the array is read-only."""

    images: np.ndarray
    name: str
    split: Split = "train"
    source: Source = "synthetic"

    def __post_init__(self) -> None:
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE, 1):
            raise ShapeError(f"ImageDataset {self.name!r}: expected N x {IMAGE_SIZE} x {IMAGE_SIZE} x 1, got {images.shape}")
        if images.shape[0] < 1:
            raise ShapeError(f"ImageDataset {self.name!r}: no images")
        if not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0:
            raise ValueError(f"ImageDataset {self.name!r}: pixels must lie in [0, 1]")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)

    def __len__(self) -> int:
        return int(self.images.shape[0])


def resize_bilinear(images: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize of (N, H, W) images to (N, size, size), align-corners off.

    Source coordinates use half-pixel centres and are clamped at the border,
    so resizing to the current size is the identity.
    """
    images = np.asarray(images, dtype=np.float64)
    _, h, w = images.shape

    def axis(in_size: int) -> tuple:
        src = (np.arange(size) + 0.5) * (in_size / size) - 0.5
        src = np.clip(src, 0.0, in_size - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, in_size - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(h)
    x0, x1, wx = axis(w)
    top = images[:, y0, :] * (1 - wy)[None, :, None] + images[:, y1, :] * wy[None, :, None]
    return top[:, :, x0] * (1 - wx)[None, None, :] + top[:, :, x1] * wx[None, None, :]


def to_grayscale(rgb_image: np.ndarray) -> np.ndarray:
    """BT.601 luma of (..., H, W, 3) images in [0, 1]; returns (..., H, W, 1)."""
    rgb_image = np.asarray(rgb_image, dtype=np.float64)
    if rgb_image.ndim < 3 or rgb_image.shape[-1] != 3:
        raise ShapeError(f"to_grayscale: expected 3 channels, got shape {rgb_image.shape}")
    gray = rgb_image @ LUMA_WEIGHTS
    return np.clip(gray, 0.0, 1.0)[..., None]


def _finish(raw: np.ndarray, name: str, split: Split, source: Source) -> ImageDataset:
    """(N, H, W) floats in [0, 1] -> preprocessed ImageDataset."""
    resized = np.clip(resize_bilinear(raw, IMAGE_SIZE), 0.0, 1.0)
    return ImageDataset(resized[..., None].astype(np.float32), name=name, split=split, source=source)


def load_idx(image_path: str, limit: Optional[int] = None, split: Split = "train", name: Optional[str] = None) -> ImageDataset:
    """Read an unsigned-byte rank-3 IDX image file, optionally gzip-compressed."""
    if not os.path.exists(image_path):
        raise FileNotFoundError(f"IDX file not found: {image_path}")

    opener = gzip.open if image_path.endswith(".gz") else open
    with opener(image_path, "rb") as f:
        payload = f.read()

    if len(payload) < 4:
        raise DataFormatError("IDX header truncated: missing magic", offset=len(payload))
    (magic,) = struct.unpack(">I", payload[:4])
    if magic >> 8 != 0x08 or magic >> 16:
        raise DataFormatError(f"bad IDX magic 0x{magic:08x}, expected unsigned-byte data", offset=0)
    rank = magic & 0xFF
    if rank != 3:
        raise DataFormatError(f"IDX rank {rank} != 3", offset=3)
    if len(payload) < 16:
        raise DataFormatError("IDX header truncated: missing dimensions", offset=len(payload))
    count, rows, cols = struct.unpack(">III", payload[4:16])
    if count < 1 or rows < 1 or cols < 1:
        raise DataFormatError(f"IDX dimensions must be positive, got {(count, rows, cols)}", offset=4)

    expected = 16 + count * rows * cols
    if len(payload) < expected:
        raise DataFormatError(
            f"IDX payload truncated: expected {expected} bytes, got {len(payload)}", offset=len(payload)
        )

    n = count if limit is None else min(limit, count)
    raw = np.frombuffer(payload, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)
    dataset = _finish(raw / 255.0, name or _stem(image_path), split, "idx")
    logger.info(f"Loaded IDX dataset {dataset.name}", extra={"count": n, "rows": rows, "cols": cols})
    return dataset


def load_rawrgb(path: str, limit: Optional[int] = None, split: Split = "train", name: Optional[str] = None) -> ImageDataset:
    """Read ``RAWRGB <count> <height> <width>\\n`` followed by channel-planar bytes."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"RAWRGB file not found: {path}")

    with open(path, "rb") as f:
        payload = f.read()

    newline = payload.find(b"\n")
    if newline < 0:
        raise DataFormatError("RAWRGB header line not terminated", offset=len(payload))
    fields = payload[:newline].split()
    if len(fields) != 4 or fields[0] != RAWRGB_MAGIC.encode():
        raise DataFormatError(f"bad RAWRGB header {payload[:newline][:64]!r}", offset=0)
    try:
        count, height, width = (int(x) for x in fields[1:])
    except ValueError:
        raise DataFormatError("RAWRGB header dimensions are not integers", offset=len(fields[0]) + 1) from None
    if count < 1 or height < 1 or width < 1:
        raise DataFormatError(f"RAWRGB dimensions must be positive, got {(count, height, width)}", offset=0)

    start = newline + 1
    expected = start + count * 3 * height * width
    if len(payload) < expected:
        raise DataFormatError(
            f"RAWRGB payload truncated: expected {expected} bytes, got {len(payload)}", offset=len(payload)
        )

    n = count if limit is None else min(limit, count)
    planar = np.frombuffer(payload, dtype=np.uint8, count=n * 3 * height * width, offset=start)
    rgb = planar.reshape(n, 3, height, width).transpose(0, 2, 3, 1) / 255.0
    dataset = _finish(to_grayscale(rgb)[..., 0], name or _stem(path), split, "rawrgb")
    logger.info(f"Loaded RAWRGB dataset {dataset.name}", extra={"count": n, "rows": height, "cols": width})
    return dataset


def _stem(path: str) -> str:
    base = os.path.basename(path)
    for ext in (".gz", ".idx3-ubyte", "-idx3-ubyte", ".ubyte", ".idx", ".raw", ".bin"):
        if base.endswith(ext):
            base = base[: -len(ext)]
    return base


# Synthetic datasets
#
# Pixels are scored as Bernoulli parameters, so an image whose pixels sit near
# intensity g costs about H(g) nats per pixel whatever the model learns. Both
# kinds therefore share the grey range: blobs sit on a fixed background just
# below the texture levels, and textures are zero-mean around a per-image level.

BLOB_BACKGROUND = 0.3
TEXTURE_LEVELS = (0.35, 0.65)


def _blobs(rng: np.random.Generator, complexity: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), BLOB_BACKGROUND)
    for _ in range(int(round(complexity * 8))):
        cy, cx = rng.uniform(4, size - 4, size=2)
        radius = rng.uniform(1.5, 2.5 + 4.0 * complexity)
        amplitude = rng.uniform(0.3, 0.6)
        img += amplitude * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
    if complexity > 0:
        img += 0.1 * complexity * rng.standard_normal((size, size))
    return img


def _stripes(rng: np.random.Generator, complexity: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size))
    components = 1 + int(round(complexity * 3))
    for _ in range(components):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.0, 1.0 + 6.0 * complexity)
        phase = rng.uniform(0, 2 * np.pi)
        img += np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    contrast = 0.2 + 0.8 * complexity
    img = 0.5 + 0.5 * contrast * img / components
    return img + 0.15 * complexity * rng.standard_normal((size, size))


def _noise_texture(rng: np.random.Generator, complexity: float, size: int) -> np.ndarray:
    level = rng.uniform(*TEXTURE_LEVELS)
    noise = rng.random((size, size))
    radius = int(round((1.0 - complexity) * 4))
    if radius:
        noise = uniform_filter(noise, size=2 * radius + 1, mode="wrap")
    z = (noise - noise.mean()) / (noise.std() + 1e-8)
    return level + 0.25 * complexity * z


_RENDERERS: Dict[str, Callable[[np.random.Generator, float, int], np.ndarray]] = {
    "blobs": _blobs,
    "stripes": _stripes,
    "noise-texture": _noise_texture,
}


def synth_generate(spec: SyntheticSpec, split: Split = "train", name: Optional[str] = None) -> ImageDataset:
    """Deterministic procedural dataset; ``complexity`` raises per-image entropy."""
    if spec.count < 1:
        raise ValueError("synth_generate: count must be positive")
    rng = np.random.default_rng(spec.seed)
    render = _RENDERERS[spec.kind]
    images = np.stack([render(rng, spec.complexity, IMAGE_SIZE) for _ in range(spec.count)])
    images = np.clip(images, 0.0, 1.0)[..., None].astype(np.float32)
    return ImageDataset(
        images, name=name or f"{spec.kind}-c{spec.complexity:g}", split=split, source="synthetic"
    )


def image_entropy(images: np.ndarray, bins: int = 32) -> np.ndarray:
    """Shannon entropy (nats) of each image's pixel histogram over [0, 1]."""
    flat = np.asarray(images).reshape(len(images), -1)
    idx = np.minimum((flat * bins).astype(int), bins - 1)
    counts = np.stack([np.bincount(row, minlength=bins) for row in idx]).astype(np.float64)
    p = counts / counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=1)


# Batching


def batch_iter(dataset: ImageDataset, batch_size: int, seed: int = 0, shuffle: bool = True, epoch: int = 0) -> Iterator[np.ndarray]:
    """Yield (B, 32, 32, 1) batches covering the dataset exactly once.

    With ``shuffle`` the order is a permutation seeded by (seed, epoch); the
    last batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_iter: batch_size must be positive")
    n = len(dataset)
    if batch_size > n:
        raise ValueError(f"batch_iter: batch_size {batch_size} exceeds dataset size {n}")
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield dataset.images[order[start : start + batch_size]]


class CyclicSampler:
    """Endless stream of dataset indices; reshuffles each time it wraps."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self._order = rng.permutation(size)
        self._pos = 0

    def take(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            if self._pos == self.size:
                self._order = self.rng.permutation(self.size)
                self._pos = 0
            chunk = self._order[self._pos : self._pos + count]
            self._pos += len(chunk)
            count -= len(chunk)
            out.append(chunk)
        return np.concatenate(out)


# Dataset references


def resolve_dataset(reference: str, split: Split = "train", limit: Optional[int] = None) -> ImageDataset:
    """Build a dataset from ``[NAME=]idx:PATH``, ``rawrgb:PATH`` or
    ``synthetic:KIND:COMPLEXITY:COUNT:SEED``."""
    name: Optional[str] = None
    head, sep, rest = reference.partition("=")
    if sep and ":" not in head:
        name, reference = head, rest

    kind, _, arg = reference.partition(":")
    if kind == "idx":
        return load_idx(arg, limit=limit, split=split, name=name)
    if kind == "rawrgb":
        return load_rawrgb(arg, limit=limit, split=split, name=name)
    if kind == "synthetic":
        parts = arg.split(":")
        if len(parts) != 4:
            raise ConfigError(f"synthetic reference needs KIND:COMPLEXITY:COUNT:SEED, got {reference!r}")
        try:
            spec = SyntheticSpec(
                kind=parts[0], complexity=float(parts[1]), count=int(parts[2]), seed=int(parts[3])
            )
        except ValueError as e:
            raise ConfigError(f"bad synthetic reference {reference!r}: {e}".replace("\n", " ")) from None
        if limit is not None:
            spec = spec.model_copy(update={"count": min(limit, spec.count)})
        return synth_generate(spec, split=split, name=name)
    raise ConfigError(f"unknown dataset reference {reference!r}")
