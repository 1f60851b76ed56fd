"""SimCLR-style augmentation for small ``(H, W, C)`` float images in [0, 1].

Applied in a fixed order: random resized crop, horizontal flip, colour
jitter, gaussian blur, random grayscale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentationConfig:
    crop_scale: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    gray_p: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValidationError(f"crop scale range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0.0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise ValidationError("bad crop aspect-ratio range")
        for name in ("flip_p", "jitter_p", "blur_p", "gray_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must be a probability, got {p}")
        if min(self.brightness, self.contrast, self.saturation) < 0:
            raise ValidationError("jitter strengths must be >= 0")
        if not 0.0 <= self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ValidationError("bad blur sigma range")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(
            crop_scale=(1.0, 1.0),
            flip_p=0.0,
            jitter_p=0.0,
            brightness=0.0,
            contrast=0.0,
            saturation=0.0,
            blur_p=0.0,
            blur_sigma=(0.0, 0.0),
            gray_p=0.0,
        )


def _bilinear_crop(img: np.ndarray, top: float, left: float, ch: float, cw: float) -> np.ndarray:
    h, w = img.shape[:2]
    ys = top + (np.arange(h) + 0.5) * ch / h - 0.5
    xs = left + (np.arange(w) + 0.5) * cw / w - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top_row = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot_row = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top_row * (1 - wy) + bot_row * wy


def random_resized_crop(img: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    area = h * w
    log_lo, log_hi = math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1])
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        cw = math.sqrt(target * ratio)
        chh = math.sqrt(target / ratio)
        if cw <= w and chh <= h:
            top = rng.uniform(0, h - chh)
            left = rng.uniform(0, w - cw)
            return _bilinear_crop(img, top, left, chh, cw)
    return img.copy()


def grayscale(img: np.ndarray) -> np.ndarray:
    if img.shape[2] != 3:
        return img.mean(axis=2, keepdims=True).repeat(img.shape[2], axis=2)
    lum = img @ LUMA
    return np.repeat(lum[:, :, None], 3, axis=2)


def color_jitter(img: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    def factor(strength: float) -> float:
        return rng.uniform(max(0.0, 1 - strength), 1 + strength) if strength > 0 else 1.0

    out = np.clip(img * factor(cfg.brightness), 0, 1)
    c = factor(cfg.contrast)
    out = np.clip((out - grayscale(out).mean()) * c + grayscale(out).mean(), 0, 1)
    s = factor(cfg.saturation)
    gray = grayscale(out)
    return np.clip(gray + (out - gray) * s, 0, 1)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    radius = max(1, int(math.ceil(3 * sigma)))
    t = np.arange(-radius, radius + 1)
    k = np.exp(-(t**2) / (2 * sigma**2))
    k /= k.sum()
    pad = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="reflect" if img.shape[0] > radius else "edge")
    out = sum(k[i] * pad[i : i + img.shape[0]] for i in range(len(k)))
    pad = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="reflect" if img.shape[1] > radius else "edge")
    return sum(k[i] * pad[:, i : i + img.shape[1]] for i in range(len(k)))


def augment(image, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValidationError(f"expected an (H, W, C) image, got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValidationError("image values must lie in [0, 1]")
    img = random_resized_crop(img, cfg, rng)
    if rng.random() < cfg.flip_p:
        img = img[:, ::-1]
    if rng.random() < cfg.jitter_p:
        img = color_jitter(img, cfg, rng)
    if rng.random() < cfg.blur_p:
        img = gaussian_blur(img, rng.uniform(*cfg.blur_sigma))
    if rng.random() < cfg.gray_p:
        img = grayscale(img)
    return np.clip(img, 0.0, 1.0)


def augment_batch(images, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(im, cfg, rng) for im in images])
