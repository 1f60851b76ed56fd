"""Synthetic image datasets and the fixed teacher embedder.

Each class owns a smooth colour template drawn from its own seed. Samples
are noisy, shifted, recoloured copies of their class template with a random
distractor blob pasted on top, so pixel distance alone is a weak class cue.

The teacher is a frozen random network that stands in for a large
pre-trained server model: it standardizes each colour channel, pools 2x2
neighbourhoods, and projects the result to a unit-norm embedding. Those fixed
invariances are the knowledge a small local encoder lacks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    MagicMismatchError,
    TruncatedFileError,
    UnsupportedVersionError,
    ValidationError,
)

DS_MAGIC = b"CRDS"
DS_VERSION = 1


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    classes: int = 3
    per_class: int = 100
    h: int = 8
    w: int = 8
    ch: int = 3
    seed: int = 0
    noise: float = 0.2
    distractor: float = 0.8
    max_shift: int = 2
    cast: float = 0.3
    contrast: tuple[float, float] = (0.3, 1.7)

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ValidationError("need at least two classes")
        if min(self.per_class, self.h, self.w, self.ch) < 1:
            raise ValidationError("dataset dimensions must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.h, self.w, self.ch)

    def class_seed(self, c: int) -> tuple[int, int]:
        return (self.seed, c)


class Dataset(NamedTuple):
    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (N,) int32

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def _blob_field(rng: np.random.Generator, h: int, w: int, ch: int, blobs: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field = np.zeros((h, w, ch))
    for _ in range(blobs):
        cy, cx = rng.uniform(-0.5, h - 0.5), rng.uniform(-0.5, w - 0.5)
        rad = rng.uniform(0.12, 0.35) * max(h, w)
        color = rng.uniform(-1.0, 1.0, size=ch)
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad**2))
        field += g[:, :, None] * color
    return field


def class_templates(spec: SyntheticDatasetSpec) -> np.ndarray:
    temps = []
    for c in range(spec.classes):
        rng = np.random.default_rng(spec.class_seed(c))
        t = 0.5 + 0.35 * _blob_field(rng, spec.h, spec.w, spec.ch, blobs=3)
        temps.append(np.clip(t, 0.0, 1.0))
    return np.stack(temps)


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.roll(img, (dy, dx), axis=(0, 1))
    # replicate edges instead of wrapping around
    if dy > 0:
        out[:dy] = out[dy]
    elif dy < 0:
        out[dy:] = out[dy - 1]
    if dx > 0:
        out[:, :dx] = out[:, dx : dx + 1]
    elif dx < 0:
        out[:, dx:] = out[:, dx - 1 : dx]
    return out


def generate_dataset(spec: SyntheticDatasetSpec, sample_seed: int = 0) -> Dataset:
    """Draw ``classes * per_class`` images; samples depend on ``sample_seed``."""
    temps = class_templates(spec)
    rng = np.random.default_rng((spec.seed, 7919, sample_seed))
    n = spec.classes * spec.per_class
    labels = np.repeat(np.arange(spec.classes, dtype=np.int32), spec.per_class)
    labels = labels[rng.permutation(n)]
    images = np.empty((n,) + spec.shape, dtype=np.float32)
    for i, c in enumerate(labels):
        s = spec.max_shift
        img = _shift(temps[c], int(rng.integers(-s, s + 1)), int(rng.integers(-s, s + 1)))
        mean = img.mean()
        img = (img - mean) * rng.uniform(*spec.contrast) + mean + rng.normal(0.0, spec.cast, size=spec.ch)
        img = img + spec.distractor * 0.5 * _blob_field(rng, spec.h, spec.w, spec.ch, blobs=1)
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels)


# --------------------------------------------------------------------------
# dataset cache

_DS_HEADER = struct.Struct("<4sBIQHHH")


def save_dataset(ds: Dataset, path, classes: int) -> int:
    n, h, w, ch = ds.images.shape
    rec = np.dtype([("label", "<i4"), ("pix", "<f4", (h * w * ch,))])
    body = np.empty(n, dtype=rec)
    body["label"] = ds.labels
    body["pix"] = ds.images.reshape(n, -1)
    data = _DS_HEADER.pack(DS_MAGIC, DS_VERSION, classes, n, h, w, ch) + body.tobytes()
    Path(path).write_bytes(data)
    return len(data)


def load_dataset(path) -> tuple[Dataset, int]:
    """Returns the dataset and its declared class count."""
    data = Path(path).read_bytes()
    if len(data) < _DS_HEADER.size:
        raise TruncatedFileError("dataset header truncated")
    magic, version, classes, n, h, w, ch = _DS_HEADER.unpack_from(data)
    if magic != DS_MAGIC:
        raise MagicMismatchError(f"bad magic {magic!r}")
    if version != DS_VERSION:
        raise UnsupportedVersionError(f"unsupported dataset version {version}")
    rec = np.dtype([("label", "<i4"), ("pix", "<f4", (h * w * ch,))])
    need = _DS_HEADER.size + n * rec.itemsize
    if len(data) < need:
        raise TruncatedFileError(f"dataset payload truncated: need {need} bytes, have {len(data)}")
    body = np.frombuffer(data, dtype=rec, count=n, offset=_DS_HEADER.size)
    images = body["pix"].reshape(n, h, w, ch).astype(np.float32)
    return Dataset(images, body["label"].astype(np.int32)), classes


# --------------------------------------------------------------------------
# teacher


@lru_cache(maxsize=16)
def _teacher_weights(seed: int, in_dim: int, hidden: int, d: int):
    rng = np.random.default_rng((seed, 0x7EAC))
    w1 = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, hidden))
    b1 = rng.normal(0.0, 0.1, size=hidden)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, d))
    for a in (w1, b1, w2):
        a.setflags(write=False)
    return w1, b1, w2


def _teacher_features(images: np.ndarray) -> np.ndarray:
    n, h, w, ch = images.shape
    # per-channel standardization removes colour casts and contrast changes
    x = images - images.mean(axis=(1, 2), keepdims=True)
    x = x / (x.std(axis=(1, 2), keepdims=True) + 1e-3)
    if h % 2 == 0 and w % 2 == 0:
        x = x.reshape(n, h // 2, 2, w // 2, 2, ch).mean(axis=(2, 4))
    return x.reshape(n, -1)


def teacher_encode_batch(images, teacher_seed: int, d: int = 64, hidden: int = 256) -> np.ndarray:
    """Embed ``(N, H, W, C)`` images with the frozen teacher; rows have unit norm."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim != 4:
        raise ValidationError(f"expected (N, H, W, C) images, got {imgs.shape}")
    feats = _teacher_features(imgs)
    w1, b1, w2 = _teacher_weights(int(teacher_seed), feats.shape[1], hidden, d)
    z = np.tanh(feats @ w1 + b1) @ w2
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def teacher_encode(image, teacher_seed: int, d: int = 64) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValidationError(f"expected an (H, W, C) image, got {img.shape}")
    return teacher_encode_batch(img[None], teacher_seed, d)[0]
