"""Linear stand-in for the image autoencoder.

Two codecs share one interface:

* identity codec (``factor=1``): the latent *is* the RGB image.
* toy codec (``factor=8``): space-to-depth by 8 (192 values per 8x8 patch),
  then a fixed orthonormal projection to 4 channels. Decoding applies the
  transpose and undoes space-to-depth, so ``decode(encode(x))`` is the
  orthogonal projection of each patch onto a 4-dimensional subspace.

The first three projection rows are the normalised per-channel patch means,
so flat colour survives the round trip exactly; the fourth row is a seeded
random direction orthogonal to them.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class CodecConfig:
    factor: int = 8
    latent_channels: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.factor not in (1, 8):
            raise ConfigError(f"codec factor must be 1 or 8, got {self.factor}")
        if self.factor == 1 and self.latent_channels != 3:
            raise ConfigError("the identity codec has exactly 3 latent channels")
        if self.factor == 8 and not 3 <= self.latent_channels <= 192:
            raise ConfigError("toy codec needs 3..192 latent channels")

    @classmethod
    def identity(cls) -> "CodecConfig":
        return cls(factor=1, latent_channels=3)


@lru_cache(maxsize=16)
def _projection(factor: int, latent_channels: int, seed: int) -> np.ndarray:
    if factor == 1:
        return np.eye(3)
    depth = 3 * factor * factor
    means = np.zeros((3, depth))
    for c in range(3):
        means[c, c * factor * factor:(c + 1) * factor * factor] = 1.0 / factor
    rng = np.random.default_rng(seed)
    extra = rng.standard_normal((latent_channels - 3, depth))
    # Gram-Schmidt through QR keeps the mean rows first and unchanged up to sign
    q, _ = np.linalg.qr(np.concatenate([means, extra]).T)
    rows = q.T[:latent_channels].copy()
    rows[:3] = means
    rows.setflags(write=False)
    return rows


def projection_matrix(cfg: CodecConfig) -> np.ndarray:
    """Row-orthonormal ``latent_channels x (3 * factor**2)`` matrix."""
    return _projection(cfg.factor, cfg.latent_channels, cfg.seed)


def space_to_depth(img: np.ndarray, factor: int) -> np.ndarray:
    c, h, w = img.shape
    x = img.reshape(c, h // factor, factor, w // factor, factor)
    return x.transpose(0, 2, 4, 1, 3).reshape(c * factor * factor, h // factor, w // factor)


def depth_to_space(x: np.ndarray, factor: int) -> np.ndarray:
    d, h, w = x.shape
    c = d // (factor * factor)
    x = x.reshape(c, factor, factor, h, w)
    return x.transpose(0, 3, 1, 4, 2).reshape(c, h * factor, w * factor)


def encode(img: np.ndarray, cfg: CodecConfig = CodecConfig()) -> np.ndarray:
    """Map a ``3 x H x W`` image (or a batch of them) to its latent."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 4:
        return np.stack([encode(x, cfg) for x in img])
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected a 3 x H x W image, got shape {img.shape}")
    _, h, w = img.shape
    f = cfg.factor
    if h % f or w % f:
        raise DimensionError(f"image size {h}x{w} not divisible by codec factor {f}")
    if f == 1:
        return img.copy()
    p = projection_matrix(cfg)
    s2d = space_to_depth(img, f)
    return np.einsum("kd,dhw->khw", p, s2d)


def decode(z: np.ndarray, cfg: CodecConfig = CodecConfig(), clamp: bool = True) -> np.ndarray:
    """Map a latent back to a ``3 x H x W`` image, clamped to [0, 1]."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 4:
        return np.stack([decode(x, cfg, clamp) for x in z])
    if z.ndim != 3 or z.shape[0] != cfg.latent_channels:
        raise DimensionError(
            f"expected a {cfg.latent_channels}-channel latent, got shape {z.shape}"
        )
    if cfg.factor == 1:
        img = z.copy()
    else:
        p = projection_matrix(cfg)
        img = depth_to_space(np.einsum("kd,khw->dhw", p, z), cfg.factor)
    return np.clip(img, 0.0, 1.0) if clamp else img


def load_png(path) -> np.ndarray:
    """8-bit RGB PNG -> ``3 x H x W`` float array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def save_png(img: np.ndarray, path) -> Path:
    arr = np.clip(np.asarray(img), 0.0, 1.0).transpose(1, 2, 0)
    path = Path(path)
    Image.fromarray(np.round(arr * 255).astype(np.uint8), "RGB").save(path)
    return path
