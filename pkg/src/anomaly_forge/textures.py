"""Procedural grayscale textures used as the bundled "normal" data source."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("stripes", "blobs")


@dataclass(frozen=True)
class TextureConfig:
    kind: str = "stripes"
    size: int = 64
    # stripes
    angle_deg: float = 30.0
    angle_jitter_deg: float = 8.0
    period: tuple[float, float] = (6.0, 9.0)
    amplitude: tuple[float, float] = (0.28, 0.38)
    # blobs
    blob_count: int = 40
    blob_radius: tuple[float, float] = (2.0, 3.5)
    noise: float = 0.02


def stripes(rng: np.random.Generator, cfg: TextureConfig) -> np.ndarray:
    n = cfg.size
    theta = np.deg2rad(cfg.angle_deg + rng.uniform(-cfg.angle_jitter_deg, cfg.angle_jitter_deg))
    period = rng.uniform(*cfg.period)
    amp = rng.uniform(*cfg.amplitude)
    phase = rng.uniform(0.0, 2 * np.pi)
    rr, cc = np.mgrid[0:n, 0:n].astype(np.float64)
    u = cc * np.cos(theta) + rr * np.sin(theta)
    img = 0.5 + amp * np.sin(2 * np.pi * u / period + phase)
    # slow illumination drift
    tilt = rng.uniform(-0.05, 0.05, size=2)
    img += tilt[0] * (rr / n - 0.5) + tilt[1] * (cc / n - 0.5)
    img += rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def blobs(rng: np.random.Generator, cfg: TextureConfig) -> np.ndarray:
    n = cfg.size
    rr, cc = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.zeros((n, n))
    for _ in range(cfg.blob_count):
        r0, c0 = rng.uniform(0, n, size=2)
        rad = rng.uniform(*cfg.blob_radius)
        img += np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * rad**2))
    img = img / max(img.max(), 1e-12)
    img = 0.2 + 0.6 * img + rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(seed: int, cfg: TextureConfig = TextureConfig()) -> np.ndarray:
    """Return one ``size x size x 1`` texture in [0, 1] for ``seed``."""
    rng = np.random.default_rng([seed, 0x7E47])
    if cfg.kind == "stripes":
        img = stripes(rng, cfg)
    elif cfg.kind == "blobs":
        img = blobs(rng, cfg)
    else:
        raise ValueError(f"unknown texture kind {cfg.kind!r}; expected one of {KINDS}")
    return img[:, :, None]
