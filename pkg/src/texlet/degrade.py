"""Synthetic texture degradation: blur, down/up resampling, noise, JPEG, in that order."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .raster import sample_bilinear

STAGE_ORDER = ("blur", "resample", "noise", "jpeg")

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class DegradeConfig:
    seed: int = 0
    downsample_factor: int = 2
    blur_sigma: float = 1.0
    noise_sigma: float = 4.0
    jpeg_quality: int = 60

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.downsample_factor not in (1, 2, 4):
            raise ValueError(f"downsample_factor must be 1, 2 or 4, got {self.downsample_factor}")
        if not 0.0 <= self.blur_sigma <= 3.0:
            raise ValueError(f"blur_sigma must be in [0, 3], got {self.blur_sigma}")
        if not 0.0 <= self.noise_sigma <= 10.0:
            raise ValueError(f"noise_sigma must be in [0, 10], got {self.noise_sigma}")
        if not 30 <= self.jpeg_quality <= 100:
            raise ValueError(f"jpeg_quality must be in [30, 100], got {self.jpeg_quality}")

    @property
    def stage_order(self) -> tuple:
        return STAGE_ORDER


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable normalized Gaussian with mirrored borders (float in, float out)."""
    if sigma <= 0:
        return image.astype(np.float64, copy=True)
    k = gaussian_kernel(sigma)
    out = ndimage.convolve1d(image.astype(np.float64), k, axis=0, mode="reflect")
    return ndimage.convolve1d(out, k, axis=1, mode="reflect")


def _resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = image.shape[:2]
    ys = (np.arange(height) + 0.5) * (h / height)
    xs = (np.arange(width) + 0.5) * (w / width)
    gx, gy = np.meshgrid(xs, ys)
    return sample_bilinear(image, gx, gy)


def down_up(image: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear downsample by ``factor`` then back to the original size (texel centers aligned)."""
    if factor == 1:
        return image.astype(np.float64, copy=True)
    h, w = image.shape[:2]
    small = _resize(image.astype(np.float64), max(1, round(h / factor)), max(1, round(w / factor)))
    return _resize(small, h, w)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def counter_normal(seed: int, shape) -> np.ndarray:
    """Standard normals where entry k depends only on (seed, k): hash then Box-Muller."""
    n = int(np.prod(shape))
    with np.errstate(over="ignore"):
        key = _splitmix64(np.array([seed], dtype=np.uint64))[0]
        ctr = np.arange(n, dtype=np.uint64) * np.uint64(2)
        h1 = _splitmix64(key ^ ctr)
        h2 = _splitmix64(key ^ (ctr + np.uint64(1)))
    scale = 2.0**-53
    u1 = ((h1 >> np.uint64(11)).astype(np.float64) + 0.5) * scale
    u2 = (h2 >> np.uint64(11)).astype(np.float64) * scale
    return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)).reshape(shape)


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    if quality >= 100:
        return image.copy()
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="JPEG", quality=int(quality), optimize=False, progressive=False)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB")).copy()


def degrade_texture(texture: np.ndarray, cfg: DegradeConfig) -> np.ndarray:
    """uint8 RGB in, uint8 RGB out, same size; a pure function of (texture, cfg)."""
    img = np.asarray(texture)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"texture must be an (H, W, 3) uint8 image, got {img.dtype} {img.shape}")
    x = img.astype(np.float64)
    x = gaussian_blur(x, cfg.blur_sigma)
    x = down_up(x, cfg.downsample_factor)
    if cfg.noise_sigma > 0:
        x = x + cfg.noise_sigma * counter_normal(cfg.seed, x.shape)
    out = np.clip(np.round(x), 0, 255).astype(np.uint8)
    return jpeg_roundtrip(out, cfg.jpeg_quality)
