"""Multi-mask fusion: level anomaly maps -> mask-convolution tokens -> expert knowledge.

Keys owned (prefix ``mmf.``)::

    l{l}.c1.{k,b}   3x3 stride-2 conv, 1 -> c_mid, then ReLU
    l{l}.c2.{k,b}   3x3 stride-2 conv, c_mid -> C3, then ReLU
    l{l}.dw.k       3x3 depthwise kernel over C3 channels
    l{l}.pw.{k,b}   1x1 pointwise kernel C3 -> C3 (+ bias)
    e_base          L3 x C_emb trainable base tokens
"""

from __future__ import annotations

import numpy as np

from .numerics import (
    DimensionError,
    adaptive_avg_pool2d,
    adaptive_avg_pool2d_vjp,
    conv2d,
    conv2d_vjp,
    depthwise_conv2d,
    depthwise_conv2d_vjp,
    relu,
)
from .scoring import N_LEVELS

P = "mmf."
POOL_GRID = 2


def init_mmf(rng: np.random.Generator, c3: int, l3: int = 4, c_mid: int = 8) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for l in range(N_LEVELS):
        pre = f"{P}l{l}."
        params[pre + "c1.k"] = rng.standard_normal((3, 3, 1, c_mid)) * np.sqrt(2.0 / 9)
        params[pre + "c1.b"] = np.zeros(c_mid)
        params[pre + "c2.k"] = rng.standard_normal((3, 3, c_mid, c3)) * np.sqrt(2.0 / (9 * c_mid))
        params[pre + "c2.b"] = np.zeros(c3)
        params[pre + "dw.k"] = rng.standard_normal((3, 3, c3)) / 3.0
        params[pre + "pw.k"] = rng.standard_normal((1, 1, c3, c3)) / np.sqrt(c3)
        params[pre + "pw.b"] = np.zeros(c3)
    params[P + "e_base"] = rng.standard_normal((l3, N_LEVELS * c3)) * 0.1
    return params


def mcb_forward(params, level: int, m: np.ndarray, grid: int = POOL_GRID):
    """Mask convolution block on ``m[..., h, w]``; returns ``(..., L1, C3)`` tokens."""
    pre = f"{P}l{level}."
    x0 = m[..., None]
    if m.shape[-2] + 2 < 3 or m.shape[-1] + 2 < 3:
        raise DimensionError(f"map {m.shape[-2:]} too small for the first kernel")
    z1 = conv2d(x0, params[pre + "c1.k"], stride=2, padding=1) + params[pre + "c1.b"]
    r1 = relu(z1)
    z2 = conv2d(r1, params[pre + "c2.k"], stride=2, padding=1) + params[pre + "c2.b"]
    r2 = relu(z2)
    d = depthwise_conv2d(r2, params[pre + "dw.k"], stride=1, padding=1)
    z3 = conv2d(d, params[pre + "pw.k"]) + params[pre + "pw.b"]
    pooled = adaptive_avg_pool2d(z3, grid)
    tokens = pooled.reshape(pooled.shape[:-3] + (grid * grid, pooled.shape[-1]))
    return tokens, (x0, z1, r1, z2, r2, d, z3)


def mcb_backward(params, level: int, cache, g_tokens, grid: int = POOL_GRID):
    pre = f"{P}l{level}."
    x0, z1, r1, z2, r2, d, z3 = cache
    flat = lambda t: t.reshape(-1, t.shape[-1])  # noqa: E731
    g_pooled = g_tokens.reshape(g_tokens.shape[:-2] + (grid, grid, g_tokens.shape[-1]))
    gz3 = adaptive_avg_pool2d_vjp(z3.shape, grid, g_pooled)
    grads = {pre + "pw.b": flat(gz3).sum(axis=0)}
    gd, grads[pre + "pw.k"] = conv2d_vjp(d, params[pre + "pw.k"], gz3)
    gr2, grads[pre + "dw.k"] = depthwise_conv2d_vjp(r2, params[pre + "dw.k"], gd, 1, 1)
    gz2 = gr2 * (z2 > 0)
    grads[pre + "c2.b"] = flat(gz2).sum(axis=0)
    gr1, grads[pre + "c2.k"] = conv2d_vjp(r1, params[pre + "c2.k"], gz2, 2, 1)
    gz1 = gr1 * (z1 > 0)
    grads[pre + "c1.b"] = flat(gz1).sum(axis=0)
    gx0, grads[pre + "c1.k"] = conv2d_vjp(x0, params[pre + "c1.k"], gz1, 2, 1)
    return gx0[..., 0], grads


def mcb_embed(m: np.ndarray, params, level: int = 0, grid: int = POOL_GRID) -> np.ndarray:
    """``L1 x C3`` prompt tokens for a single ``h x w`` map."""
    return mcb_forward(params, level, np.asarray(m, dtype=np.float64), grid)[0]


def fuse(e_decs) -> np.ndarray:
    """Concatenate the four level token blocks along channels, level order 1..4."""
    if len(e_decs) != N_LEVELS:
        raise DimensionError(f"fuse expects {N_LEVELS} blocks, got {len(e_decs)}")
    shape = e_decs[0].shape
    for i, e in enumerate(e_decs):
        if e.shape != shape:
            raise DimensionError(f"block {i} has shape {e.shape}, expected {shape}")
    return np.concatenate(e_decs, axis=-1)


def split(e_fusion: np.ndarray) -> list[np.ndarray]:
    return np.split(e_fusion, N_LEVELS, axis=-1)


def assemble(e_fusion: np.ndarray, e_base: np.ndarray) -> np.ndarray:
    """Stack fusion tokens then base tokens along the length axis."""
    if e_fusion.shape[-1] != e_base.shape[-1]:
        raise DimensionError(f"width mismatch: fusion {e_fusion.shape[-1]} vs base {e_base.shape[-1]}")
    base = np.broadcast_to(e_base, e_fusion.shape[:-2] + e_base.shape)
    return np.concatenate([e_fusion, base], axis=-2)


def mmf_forward(params, level_maps, grid: int = POOL_GRID):
    """Expert knowledge ``(..., L1 + L3, C_emb)`` from the four native-resolution maps."""
    toks, caches = [], []
    for l, m in enumerate(level_maps):
        t, c = mcb_forward(params, l, m, grid)
        toks.append(t)
        caches.append(c)
    return assemble(fuse(toks), params[P + "e_base"]), caches


def mmf_backward(params, caches, g_expert, need_map_grads: bool = True, grid: int = POOL_GRID):
    """Returns ``(grads, g_level_maps)``."""
    l1 = grid * grid
    g_fusion, g_base = g_expert[..., :l1, :], g_expert[..., l1:, :]
    grads = {P + "e_base": g_base.reshape((-1,) + g_base.shape[-2:]).sum(axis=0)}
    g_maps = []
    for l, (gt, c) in enumerate(zip(split(g_fusion), caches)):
        gm, lg = mcb_backward(params, l, c, gt, grid)
        grads.update(lg)
        g_maps.append(gm if need_map_grads else None)
    return grads, g_maps
