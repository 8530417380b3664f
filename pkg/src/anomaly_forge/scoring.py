"""Anomaly maps from patch features: a trained text-aligned decoder and a few-shot memory bank.

Parameters are plain dicts of arrays. The decoder owns the keys
``decoder.w{l}`` (C3 x C2) and ``decoder.b{l}`` (C2) for levels l = 0..3.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .encoders import EncoderConfig, PatchFeatureStack, encode_image
from .numerics import (
    DimensionError,
    bilinear_upsample,
    bilinear_upsample_vjp,
    softmax_rows,
    softmax_rows_vjp,
)
from .prompt_bank import PromptMatrix

N_LEVELS = 4
BANK_VERSION = 1


@dataclass
class AnomalyMapSet:
    fused: np.ndarray  # H x W in [0, 1]
    levels: tuple[np.ndarray, ...]  # native-resolution level maps


def init_decoder(rng: np.random.Generator, c3: int, c2: int, scale: float = 1.0) -> dict[str, np.ndarray]:
    params = {}
    for l in range(N_LEVELS):
        params[f"decoder.w{l}"] = rng.standard_normal((c3, c2)) * (scale / np.sqrt(c3))
        params[f"decoder.b{l}"] = np.zeros(c2)
    return params


def _check_prompts(pm: PromptMatrix):
    mask = np.asarray(pm.abnormal_mask, dtype=bool)
    if mask.all() or not mask.any():
        raise ValueError("prompt matrix needs at least one normal and one abnormal column")
    return mask


def fuse_levels(level_maps: Sequence[np.ndarray], out_size: tuple[int, int]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Upsample each level map to ``out_size`` and average them."""
    ups = [bilinear_upsample(m, *out_size) for m in level_maps]
    return sum(ups) / len(ups), ups


def decoder_forward(levels, embeddings, abnormal_mask, params, out_size):
    """Batched decoder pass. ``levels[l]`` is ``(..., h_l, w_l, C3)``.

    Returns ``(fused, level_maps, cache)``.
    """
    if len(levels) != N_LEVELS:
        raise DimensionError(f"expected {N_LEVELS} feature levels, got {len(levels)}")
    mask = abnormal_mask.astype(np.float64)
    level_maps, probs = [], []
    for l, f in enumerate(levels):
        w, b = params[f"decoder.w{l}"], params[f"decoder.b{l}"]
        if f.shape[-1] != w.shape[0] or w.shape[1] != embeddings.shape[1]:
            raise DimensionError(
                f"level {l}: features {f.shape}, weight {w.shape}, prompts {embeddings.shape}"
            )
        proj = f @ w + b
        p = softmax_rows(proj @ embeddings.T)
        probs.append(p)
        level_maps.append(p @ mask)
    fused, _ = fuse_levels(level_maps, out_size)
    cache = {"levels": levels, "probs": probs, "emb": embeddings, "mask": mask, "out_size": out_size}
    return fused, level_maps, cache


def decoder_backward(params, cache, g_fused, g_level_maps=None):
    """Gradients of the decoder parameters given cotangents on fused and native maps."""
    grads = {}
    emb, mask = cache["emb"], cache["mask"]
    H, W = cache["out_size"]
    for l, (f, p) in enumerate(zip(cache["levels"], cache["probs"])):
        gm = bilinear_upsample_vjp(p.shape[:-1], H, W, g_fused / N_LEVELS) if g_fused is not None else 0.0
        if g_level_maps is not None and g_level_maps[l] is not None:
            gm = gm + g_level_maps[l]
        g_logits = softmax_rows_vjp(p, np.asarray(gm)[..., None] * mask)
        g_proj = g_logits @ emb
        grads[f"decoder.w{l}"] = f.reshape(-1, f.shape[-1]).T @ g_proj.reshape(-1, g_proj.shape[-1])
        grads[f"decoder.b{l}"] = g_proj.reshape(-1, g_proj.shape[-1]).sum(axis=0)
    return grads


def decode_map(stack: PatchFeatureStack, pm: PromptMatrix, params, out_size: tuple[int, int]) -> AnomalyMapSet:
    """Per-pixel abnormal probability mass from patch/prompt similarity, fused over levels."""
    mask = _check_prompts(pm)
    fused, level_maps, _ = decoder_forward(list(stack.levels), pm.embeddings, mask, params, out_size)
    return AnomalyMapSet(fused, tuple(level_maps))


# ---------------------------------------------------------------------------
# Few-shot memory bank
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MemoryBank:
    levels: tuple[np.ndarray, ...]  # N_l x C3, unit rows
    k: int
    seed: int

    def __post_init__(self):
        if len(self.levels) != N_LEVELS:
            raise ValueError(f"memory bank needs {N_LEVELS} levels")
        for l, b in enumerate(self.levels):
            if b.ndim != 2 or b.shape[0] < 1:
                raise ValueError(f"memory bank level {l} must be a non-empty N x C3 matrix")


def sample_shots(n_pool: int, k: int, seed: int) -> list[int]:
    """Indices of the ``k`` shots; a prefix of the same seeded permutation for every k."""
    if k < 1:
        raise ValueError("shot count k must be >= 1")
    if k > n_pool:
        raise ValueError(f"shot count k={k} exceeds the {n_pool} available normal images")
    return [int(i) for i in np.random.default_rng([seed, 0xBA4C]).permutation(n_pool)[:k]]


def build_memory_bank(
    normals: Sequence[np.ndarray],
    cfg: EncoderConfig,
    k: int,
    seed: int,
    encoder: Callable | None = None,
) -> MemoryBank:
    encoder = encoder or (lambda img: encode_image(img, cfg))
    rows: list[list[np.ndarray]] = [[] for _ in range(N_LEVELS)]
    for i in sample_shots(len(normals), k, seed):
        _, stack = encoder(normals[i])
        for l, f in enumerate(stack.levels):
            rows[l].append(f.reshape(-1, f.shape[-1]))
    return MemoryBank(tuple(np.concatenate(r) for r in rows), k, seed)


def fewshot_level_maps(levels, bank: MemoryBank) -> list[np.ndarray]:
    out = []
    for l, (f, b) in enumerate(zip(levels, bank.levels)):
        if f.shape[-1] != b.shape[1]:
            raise DimensionError(f"level {l}: feature width {f.shape[-1]} != bank width {b.shape[1]}")
        best = (f @ b.T).max(axis=-1)
        out.append(np.clip(1.0 - best, 0.0, 1.0))
    return out


def fewshot_map(stack: PatchFeatureStack, bank: MemoryBank, out_size: tuple[int, int]) -> AnomalyMapSet:
    """One minus the best cosine match in the bank, per patch, fused over levels."""
    level_maps = fewshot_level_maps(stack.levels, bank)
    fused, _ = fuse_levels(level_maps, out_size)
    return AnomalyMapSet(fused, tuple(level_maps))


def image_score(maps: AnomalyMapSet | np.ndarray) -> float:
    fused = getattr(maps, "fused", maps)
    return float(np.max(fused))


def save_memory_bank(bank: MemoryBank, path: str | Path) -> Path:
    """Write ``<path>`` (JSON manifest) and ``<path stem>.level{l}.f64`` blobs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    levels = []
    for l, b in enumerate(bank.levels):
        blob = path.with_name(f"{path.stem}.level{l}.f64")
        blob.write_bytes(np.ascontiguousarray(b, dtype="<f8").tobytes())
        levels.append({"rows": int(b.shape[0]), "c3": int(b.shape[1])})
    manifest = {"version": BANK_VERSION, "k": bank.k, "seed": bank.seed, "levels": levels}
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_memory_bank(path: str | Path) -> MemoryBank:
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("version") != BANK_VERSION:
        raise ValueError(f"{path}: unsupported memory-bank version {manifest.get('version')!r}")
    levels = []
    for l, meta in enumerate(manifest["levels"]):
        raw = path.with_name(f"{path.stem}.level{l}.f64").read_bytes()
        n, c = int(meta["rows"]), int(meta["c3"])
        if len(raw) != 8 * n * c:
            raise ValueError(f"{path}: level {l} blob has {len(raw)} bytes, expected {8 * n * c}")
        levels.append(np.frombuffer(raw, dtype="<f8").reshape(n, c).astype(np.float64))
    return MemoryBank(tuple(levels), int(manifest["k"]), int(manifest["seed"]))
