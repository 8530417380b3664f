"""Synthetic anomalies: CutPaste transplantation blended by Poisson normal cloning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .evaluation import position_cells
from .numerics import bilinear_upsample, cg_solve

AUGMENTATIONS = ("rotate", "zoom", "contrast")


class BoundsError(ValueError):
    """Raised when a patch rectangle falls outside an image."""


@dataclass(frozen=True)
class PatchSpec:
    src_rect: tuple[int, int, int, int]  # top, left, height, width
    dst_center: tuple[int, int]
    blend: str = "poisson_normal_clone"

    @property
    def size(self) -> tuple[int, int]:
        return self.src_rect[2], self.src_rect[3]

    def dst_top_left(self) -> tuple[int, int]:
        h, w = self.size
        return self.dst_center[0] - h // 2, self.dst_center[1] - w // 2


@dataclass
class SynthSample:
    image: np.ndarray
    gt_mask: np.ndarray
    label: str
    position_cells: list[int] = field(default_factory=list)

    def __post_init__(self):
        if (self.label == "normal") != (not np.any(self.gt_mask)):
            raise ValueError("label 'normal' must coincide with an all-zero mask")


@dataclass(frozen=True)
class SynthConfig:
    min_side_frac: float = 1 / 8
    max_side_frac: float = 1 / 3
    min_area_frac: float = 0.01
    max_area_frac: float = 0.25
    augmentations: tuple[str, ...] = AUGMENTATIONS
    contrast_gain: tuple[float, float] = (1.8, 2.6)
    coverage_threshold: float = 0.10
    max_rerolls: int = 1000


def _check_rect(shape, top, left, h, w, what):
    H, W = shape[:2]
    if h < 1 or w < 1 or top < 0 or left < 0 or top + h > H or left + w > W:
        raise BoundsError(f"{what} rect (top={top}, left={left}, h={h}, w={w}) outside {H}x{W} image")


def border_zeroed(h: int, w: int) -> np.ndarray:
    """A ``h x w`` mask of ones with its 1-pixel border set to zero."""
    m = np.zeros((h, w))
    if h > 2 and w > 2:
        m[1:-1, 1:-1] = 1.0
    return m


def cut_paste(src: np.ndarray, dst: np.ndarray, spec: PatchSpec) -> tuple[np.ndarray, np.ndarray]:
    """Copy ``spec.src_rect`` of ``src`` over ``dst`` centred at ``spec.dst_center``.

    The ground-truth mask is the pasted rectangle with its outer 1-pixel ring
    cleared, so patches thinner than 3 pixels yield an empty mask.
    """
    top, left, h, w = spec.src_rect
    _check_rect(src.shape, top, left, h, w, "source")
    dt, dl = spec.dst_top_left()
    _check_rect(dst.shape, dt, dl, h, w, "destination")
    out = np.array(dst, dtype=np.float64, copy=True)
    out[dt : dt + h, dl : dl + w] = src[top : top + h, left : left + w]
    mask = np.zeros(dst.shape[:2])
    mask[dt : dt + h, dl : dl + w] = border_zeroed(h, w)
    return out, mask


def _interior(region_mask: np.ndarray) -> np.ndarray:
    """Mask pixels whose four neighbours are all inside the mask."""
    m = np.pad(region_mask > 0.5, 1)
    return m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]


def _neighbour_sum(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, 1)
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]


def poisson_normal_clone(
    src_patch: np.ndarray,
    dst: np.ndarray,
    region_mask: np.ndarray,
    center: tuple[int, int],
    tol: float = 1e-12,
    max_iter: int = 20_000,
    clamp: bool = True,
) -> np.ndarray:
    """Blend ``src_patch`` into ``dst`` by solving a Dirichlet Poisson problem.

    ``region_mask`` is given in patch coordinates; the patch centre lands on
    ``center``. Unknowns are the mask pixels whose 4-neighbours all lie in the
    mask; the remaining mask pixels act as the fixed boundary taken from
    ``dst``. Inside, the discrete Laplacian of the result equals that of the
    source patch. Pixels outside the unknown set are copied from ``dst``
    unchanged. With ``clamp`` the solved pixels are clipped to [0, 1].
    """
    src_patch = np.asarray(src_patch, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src_patch.ndim == 2:
        src_patch = src_patch[:, :, None]
    squeeze = dst.ndim == 2
    if squeeze:
        dst = dst[:, :, None]
    h, w = src_patch.shape[:2]
    if np.shape(region_mask) != (h, w):
        raise ValueError(f"region mask shape {np.shape(region_mask)} != patch shape {(h, w)}")
    if src_patch.shape[2] != dst.shape[2]:
        raise ValueError("source patch and destination differ in channel count")
    top, left = center[0] - h // 2, center[1] - w // 2
    _check_rect(dst.shape, top, left, h, w, "destination")
    inner = _interior(region_mask)
    if not inner.any():
        raise ValueError("poisson_normal_clone: region mask has an empty interior")
    out = dst.copy()
    region = dst[top : top + h, left : left + w]
    idx = np.nonzero(inner)

    def apply_A(v: np.ndarray) -> np.ndarray:
        full = np.zeros((h, w))
        full[idx] = v
        return (4.0 * full - _neighbour_sum(full))[idx]

    for ch in range(dst.shape[2]):
        s = src_patch[:, :, ch]
        guide = 4.0 * s - _neighbour_sum(s)
        # unknowns start from the destination; solve for the correction
        d = region[:, :, ch]
        d_inner = np.where(inner, d, 0.0)
        d_ring = np.where(inner, 0.0, d)
        rhs = guide[idx] + _neighbour_sum(d_ring)[idx]
        base = d[idx]
        residual0 = rhs - (4.0 * d_inner - _neighbour_sum(d_inner))[idx]
        delta, _ = cg_solve(apply_A, residual0, tol=tol, max_iter=max_iter)
        solved = base + delta
        if clamp:
            solved = np.clip(solved, 0.0, 1.0)
        block = out[top : top + h, left : left + w, ch]
        block[idx] = solved
    return out[:, :, 0] if squeeze else out


def laplacian_residual(
    result: np.ndarray, src_patch: np.ndarray, region_mask: np.ndarray, center: tuple[int, int]
) -> float:
    """Max over interior pixels and channels of |lap(result) - lap(src_patch)|."""
    result = np.asarray(result, dtype=np.float64)
    src_patch = np.asarray(src_patch, dtype=np.float64)
    if result.ndim == 2:
        result = result[:, :, None]
    if src_patch.ndim == 2:
        src_patch = src_patch[:, :, None]
    h, w = src_patch.shape[:2]
    top, left = center[0] - h // 2, center[1] - w // 2
    worst = 0.0
    inner = _interior(region_mask)
    for i in range(h):
        for j in range(w):
            if not inner[i, j]:
                continue
            r, c = top + i, left + j
            for ch in range(result.shape[2]):
                f = result[:, :, ch]
                s = src_patch[:, :, ch]
                lap_f = 4 * f[r, c] - f[r - 1, c] - f[r + 1, c] - f[r, c - 1] - f[r, c + 1]
                lap_s = 4 * s[i, j] - s[i - 1, j] - s[i + 1, j] - s[i, j - 1] - s[i, j + 1]
                worst = max(worst, abs(lap_f - lap_s))
    return worst


def _augment(rng: np.random.Generator, src: np.ndarray, top, left, h, w, kind, cfg: SynthConfig):
    """Crop an ``h x w`` patch from ``src`` transformed by ``kind``."""
    H, W = src.shape[:2]
    if kind == "rotate":
        # crop w x h, then a quarter turn gives h x w with stripes turned 90 degrees
        t = int(rng.integers(0, H - w + 1))
        l = int(rng.integers(0, W - h + 1))
        return np.rot90(src[t : t + w, l : l + h], k=1, axes=(0, 1)).copy()
    if kind == "zoom":
        sh, sw = (h + 1) // 2, (w + 1) // 2
        t = int(rng.integers(0, H - sh + 1))
        l = int(rng.integers(0, W - sw + 1))
        crop = src[t : t + sh, l : l + sw]
        up = np.stack(
            [bilinear_upsample(crop[:, :, c], 2 * sh, 2 * sw) for c in range(crop.shape[2])], axis=-1
        )
        return up[:h, :w].copy()
    if kind == "contrast":
        patch = src[top : top + h, left : left + w]
        gain = rng.uniform(*cfg.contrast_gain)
        return patch.mean() + gain * (patch - patch.mean())
    raise ValueError(f"unknown augmentation {kind!r}")


def nsa_generate(rng_seed: int, normals: Sequence[np.ndarray], cfg: SynthConfig = SynthConfig()) -> SynthSample:
    """Draw one Poisson-blended anomalous sample, deterministic in ``rng_seed``.

    Rejected draws (mask too small or too large) retry on the next substream
    ``[rng_seed, attempt]``.
    """
    if not normals:
        raise ValueError("nsa_generate needs at least one normal image")
    H, W = normals[0].shape[:2]
    lo_h, hi_h = max(3, int(H * cfg.min_side_frac)), int(H * cfg.max_side_frac)
    lo_w, hi_w = max(3, int(W * cfg.min_side_frac)), int(W * cfg.max_side_frac)
    for attempt in range(cfg.max_rerolls):
        rng = np.random.default_rng([rng_seed, attempt])
        di = int(rng.integers(len(normals)))
        if len(normals) >= 2:
            si = int(rng.integers(len(normals) - 1))
            si += si >= di
        else:
            si = di
        dst, src = normals[di], normals[si]
        h = int(rng.integers(lo_h, hi_h + 1))
        w = int(rng.integers(lo_w, hi_w + 1))
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        cr = int(rng.integers(h // 2, H - h + h // 2 + 1))
        cc = int(rng.integers(w // 2, W - w + w // 2 + 1))
        kind = cfg.augmentations[int(rng.integers(len(cfg.augmentations)))]
        patch = _augment(rng, src, top, left, h, w, kind, cfg)
        spec = PatchSpec((top, left, h, w), (cr, cc))
        _, mask = cut_paste(src, dst, spec)
        area = mask.sum() / (H * W)
        if not (cfg.min_area_frac <= area <= cfg.max_area_frac):
            continue
        image = poisson_normal_clone(patch, dst, np.ones((h, w)), (cr, cc))
        cells = [c.id for c in position_cells(mask, cfg.coverage_threshold)]
        return SynthSample(image, mask, "abnormal", cells)
    raise RuntimeError(f"nsa_generate: no valid sample after {cfg.max_rerolls} draws")


def normal_sample(image: np.ndarray) -> SynthSample:
    return SynthSample(np.asarray(image, dtype=np.float64), np.zeros(image.shape[:2]), "normal", [])
