"""Deterministic stand-ins for frozen image and text backbones.

The image encoder summarises each grid cell by a handful of local texture
statistics (intensity, contrast, gradient orientation, a frequency proxy)
computed strictly from the pixels inside that cell, then maps them through a
fixed seeded isometry and unit-normalises. The text encoder hashes character
trigrams into a seeded random table.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Protocol

import numpy as np

from .numerics import DimensionError, as_tensor

_NORM_FLOOR = 1e-12
_N_STATS = 6
_TEXT_BUCKETS = 4096


@dataclass(frozen=True)
class EncoderConfig:
    seed: int = 0
    image_size: tuple[int, int] = (64, 64)
    level_grids: tuple[tuple[int, int], ...] = ((16, 16), (8, 8), (8, 8), (4, 4))
    c1: int = 32
    c2: int = 32
    c3: int = 16
    # finite-difference step per level; levels sharing a grid see different scales
    level_steps: tuple[int, ...] = (1, 1, 2, 2)

    def __post_init__(self):
        if len(self.level_grids) != 4:
            raise ValueError(f"exactly 4 levels required, got {len(self.level_grids)}")
        if len(self.level_steps) != 4:
            raise ValueError("level_steps must have 4 entries")
        H, W = self.image_size
        for (gh, gw), step in zip(self.level_grids, self.level_steps):
            if gh < 1 or gw < 1 or H % gh or W % gw:
                raise ValueError(f"level grid {gh}x{gw} does not evenly divide image {H}x{W}")
            if min(H // gh, W // gw) <= 2 * step:
                raise ValueError(f"cells of level grid {gh}x{gw} too small for step {step}")
        if self.c3 < _N_STATS:
            raise ValueError(f"c3 must be at least {_N_STATS}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "image_size": list(self.image_size),
            "level_grids": [list(g) for g in self.level_grids],
            "c1": self.c1,
            "c2": self.c2,
            "c3": self.c3,
            "level_steps": list(self.level_steps),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        if "level_grids" in d:
            d["level_grids"] = tuple(tuple(g) for g in d["level_grids"])
        if "level_steps" in d:
            d["level_steps"] = tuple(d["level_steps"])
        return cls(**d)


class PatchFeatureStack(NamedTuple):
    """Four levels of unit-norm patch features, level ``l`` shaped ``h_l x w_l x C3``."""

    levels: tuple[np.ndarray, ...]


class ImageEncoder(Protocol):
    def __call__(self, img: np.ndarray) -> tuple[np.ndarray, PatchFeatureStack]: ...


def unit_rows(x: np.ndarray) -> np.ndarray:
    """Normalise the last axis; vectors with norm < 1e-12 become e1."""
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    small = norms[..., 0] < _NORM_FLOOR
    out = x / np.where(norms < _NORM_FLOOR, 1.0, norms)
    if np.any(small):
        e1 = np.zeros(x.shape[-1])
        e1[0] = 1.0
        out[small] = e1
    return out


@lru_cache(maxsize=16)
def _projections(cfg: EncoderConfig):
    rng = np.random.default_rng([cfg.seed, 0x1A6E])
    patch = []
    for _ in range(4):
        q, _r = np.linalg.qr(rng.standard_normal((cfg.c3, _N_STATS)))
        patch.append(q.T.copy())  # orthonormal rows: an isometry into C3
    n_global = 4 * (2 * _N_STATS + 1)
    glob = rng.standard_normal((n_global, cfg.c1)) / np.sqrt(n_global)
    return tuple(patch), glob


@lru_cache(maxsize=16)
def _text_table(cfg: EncoderConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 0x7E47])
    return rng.standard_normal((_TEXT_BUCKETS, cfg.c2))


# stat weights: intensity, spread, contrast, two orientation terms, frequency
_STAT_WEIGHTS = np.array([0.5, 1.0, 1.0, 2.0, 2.0, 1.0])


def cell_statistics(gray: np.ndarray, grid: tuple[int, int], step: int) -> np.ndarray:
    """Raw per-cell texture statistics, shape ``gh x gw x 6``.

    Every statistic of a cell depends only on pixels inside that cell.
    """
    H, W = gray.shape
    gh, gw = grid
    sr, sc = H // gh, W // gw
    b = gray.reshape(gh, sr, gw, sc).transpose(0, 2, 1, 3)
    k = step
    gx = b[..., :, k:] - b[..., :, :-k]
    gy = b[..., k:, :] - b[..., :-k, :]
    jxx = (gx**2).mean(axis=(-2, -1))
    jyy = (gy**2).mean(axis=(-2, -1))
    jxy = (gx[..., :-k, :] * gy[..., :, :-k]).mean(axis=(-2, -1))
    dxx = b[..., :, 2 * k :] - 2 * b[..., :, k:-k] + b[..., :, : -2 * k]
    dyy = b[..., 2 * k :, :] - 2 * b[..., k:-k, :] + b[..., : -2 * k, :]
    d1 = np.abs(gx).mean(axis=(-2, -1)) + np.abs(gy).mean(axis=(-2, -1))
    d2 = np.abs(dxx).mean(axis=(-2, -1)) + np.abs(dyy).mean(axis=(-2, -1))
    energy = jxx + jyy
    contrast = energy / (energy + 0.01 * k * k)
    denom = energy + 1e-9
    stats = np.stack(
        [
            b.mean(axis=(-2, -1)),
            2.0 * b.std(axis=(-2, -1)),
            contrast,
            contrast * (jxx - jyy) / denom,
            contrast * 2.0 * jxy / denom,
            contrast * 0.5 * d2 / (d1 + 1e-9),
        ],
        axis=-1,
    )
    return stats * _STAT_WEIGHTS


def encode_image(img: np.ndarray, cfg: EncoderConfig) -> tuple[np.ndarray, PatchFeatureStack]:
    """Return ``(F_img[1 x C1], PatchFeatureStack)`` for an ``H x W x C`` image in [0, 1]."""
    img = as_tensor(img, "image")
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or tuple(img.shape[:2]) != tuple(cfg.image_size):
        raise DimensionError(f"image shape {img.shape} does not match configured size {cfg.image_size}")
    gray = img.mean(axis=-1)
    patch_proj, glob_proj = _projections(cfg)
    levels = []
    summary = []
    for grid, step, proj in zip(cfg.level_grids, cfg.level_steps, patch_proj):
        stats = cell_statistics(gray, grid, step)
        levels.append(unit_rows(stats @ proj))
        flat = stats.reshape(-1, _N_STATS)
        mu = flat.mean(axis=0)
        spread = flat.std(axis=0)
        maxdev = np.sqrt(((flat - mu) ** 2).sum(axis=1)).max()
        summary.append(np.concatenate([mu, 3.0 * spread, [3.0 * maxdev]]))
    f_img = unit_rows((np.concatenate(summary) @ glob_proj)[None, :])
    return f_img, PatchFeatureStack(tuple(levels))


def _trigrams(prompt: str) -> list[str]:
    s = "\x02" + prompt + "\x03"
    return [s[i : i + 3] for i in range(len(s) - 2)]


def encode_text(prompt: str, cfg: EncoderConfig) -> np.ndarray:
    """Unit-norm ``1 x C2`` embedding of ``prompt`` from hashed character trigrams."""
    if not isinstance(prompt, str) or not prompt:
        raise ValueError("encode_text: prompt must be a non-empty string")
    table = _text_table(cfg)
    counts = np.zeros(_TEXT_BUCKETS)
    for tri in _trigrams(prompt):
        counts[zlib.crc32(tri.encode("utf-8")) % _TEXT_BUCKETS] += 1.0
    return unit_rows((counts @ table)[None, :])


class ToyImageEncoder:
    """Callable wrapper binding :func:`encode_image` to a config."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg

    def __call__(self, img: np.ndarray) -> tuple[np.ndarray, PatchFeatureStack]:
        return encode_image(img, self.cfg)
