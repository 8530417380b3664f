"""Text-guided enhancer: text-gated mixture of experts over the global image feature.

Keys owned (prefix ``tge.``)::

    attn.{wq,wk,wv,bv}          shared self-attention over the F_img token
    align.{w,b}                 C2 -> C1 projection of category text embeddings
    e{i}.attn.{wq,wk,wv,bv}     expert i attention block
    e{i}.ffn.{w1,b1,w2,b2}      expert i feed-forward, C1 -> 2*C1 -> C_emb
"""

from __future__ import annotations

import numpy as np

from .numerics import DimensionError, relu, softmax_rows, softmax_rows_vjp

P = "tge."


def _attn_init(rng, prefix, c1):
    s = 1.0 / np.sqrt(c1)
    return {
        f"{prefix}wq": rng.standard_normal((c1, c1)) * s,
        f"{prefix}wk": rng.standard_normal((c1, c1)) * s,
        f"{prefix}wv": rng.standard_normal((c1, c1)) * (0.5 * s),
        f"{prefix}bv": np.zeros(c1),
    }


def init_tge(rng: np.random.Generator, c1: int, c2: int, c_emb: int, n_experts: int = 2) -> dict[str, np.ndarray]:
    if n_experts < 2:
        raise ValueError("TGE needs at least two experts (normal and abnormal categories)")
    params = _attn_init(rng, P + "attn.", c1)
    params[P + "align.w"] = rng.standard_normal((c2, c1)) / np.sqrt(c2)
    params[P + "align.b"] = np.zeros(c1)
    hidden = 2 * c1
    for i in range(n_experts):
        params.update(_attn_init(rng, f"{P}e{i}.attn.", c1))
        params[f"{P}e{i}.ffn.w1"] = rng.standard_normal((c1, hidden)) * np.sqrt(2.0 / c1)
        params[f"{P}e{i}.ffn.b1"] = np.zeros(hidden)
        params[f"{P}e{i}.ffn.w2"] = rng.standard_normal((hidden, c_emb)) / np.sqrt(hidden)
        params[f"{P}e{i}.ffn.b2"] = np.zeros(c_emb)
    return params


def n_experts(params) -> int:
    return sum(1 for k in params if k.startswith(P + "e") and k.endswith(".ffn.w1"))


# ---------------------------------------------------------------------------
# Attention block: x + softmax(q k^T / sqrt(d)) v, single head
# ---------------------------------------------------------------------------


def attention_forward(params, prefix: str, x: np.ndarray):
    """Residual single-head self-attention over ``x[..., n, C]``."""
    wq, wk, wv, bv = (params[prefix + k] for k in ("wq", "wk", "wv", "bv"))
    q, k = x @ wq, x @ wk
    v = x @ wv + bv
    scale = 1.0 / np.sqrt(x.shape[-1])
    a = softmax_rows(q @ np.swapaxes(k, -1, -2) * scale)
    return x + a @ v, (x, q, k, v, a, scale)


def attention_backward(params, prefix: str, cache, g):
    x, q, k, v, a, scale = cache
    wq, wk, wv = (params[prefix + n] for n in ("wq", "wk", "wv"))
    ga = g @ np.swapaxes(v, -1, -2)
    gv = np.swapaxes(a, -1, -2) @ g
    gs = softmax_rows_vjp(a, ga) * scale
    gq = gs @ k
    gk = np.swapaxes(gs, -1, -2) @ q
    flat = lambda t: t.reshape(-1, t.shape[-1])  # noqa: E731
    grads = {
        prefix + "wq": flat(x).T @ flat(gq),
        prefix + "wk": flat(x).T @ flat(gk),
        prefix + "wv": flat(x).T @ flat(gv),
        prefix + "bv": flat(gv).sum(axis=0),
    }
    gx = g + gq @ wq.T + gk @ wk.T + gv @ wv.T
    return gx, grads


# ---------------------------------------------------------------------------
# Gate and experts
# ---------------------------------------------------------------------------


def gate_forward(params, f_img: np.ndarray, f_win_cat: np.ndarray):
    """Gate weights ``softmax(Attn(F_img) . Linear(F_win)^T)``; ``f_img`` is ``(..., 1, C1)``."""
    if f_win_cat.shape[0] != n_experts(params):
        raise DimensionError(
            f"{f_win_cat.shape[0]} text categories but {n_experts(params)} experts"
        )
    a, acache = attention_forward(params, P + "attn.", f_img)
    fw = f_win_cat @ params[P + "align.w"] + params[P + "align.b"]
    if a.shape[-1] != fw.shape[-1]:
        raise DimensionError(f"image feature width {a.shape[-1]} != aligned text width {fw.shape[-1]}")
    w = softmax_rows(a @ fw.T)
    return w, (a, acache, fw, f_win_cat)


def expert_forward(params, i: int, a: np.ndarray):
    u, ucache = attention_forward(params, f"{P}e{i}.attn.", a)
    z = u @ params[f"{P}e{i}.ffn.w1"] + params[f"{P}e{i}.ffn.b1"]
    h = relu(z)
    out = h @ params[f"{P}e{i}.ffn.w2"] + params[f"{P}e{i}.ffn.b2"]
    return out, (ucache, u, z, h)


def expert_backward(params, i: int, cache, g):
    ucache, u, z, h = cache
    pre = f"{P}e{i}.ffn."
    flat = lambda t: t.reshape(-1, t.shape[-1])  # noqa: E731
    grads = {pre + "w2": flat(h).T @ flat(g), pre + "b2": flat(g).sum(axis=0)}
    gz = (g @ params[pre + "w2"].T) * (z > 0)
    grads[pre + "w1"] = flat(u).T @ flat(gz)
    grads[pre + "b1"] = flat(gz).sum(axis=0)
    gu = gz @ params[pre + "w1"].T
    ga, agrads = attention_backward(params, f"{P}e{i}.attn.", ucache, gu)
    grads.update(agrads)
    return ga, grads


def tge_forward(params, f_img: np.ndarray, f_win_cat: np.ndarray):
    """``E_img = sum_i w_i Expert_i(Attn(F_img))`` for ``f_img`` shaped ``(..., 1, C1)``."""
    w, gcache = gate_forward(params, f_img, f_win_cat)
    a = gcache[0]
    outs, caches = [], []
    for i in range(w.shape[-1]):
        o, c = expert_forward(params, i, a)
        outs.append(o)
        caches.append(c)
    e_img = sum(w[..., i : i + 1] * outs[i] for i in range(len(outs)))
    return e_img, (w, gcache, outs, caches)


def tge_backward(params, cache, g):
    w, (a, acache, fw, f_win_cat), outs, caches = cache
    grads: dict[str, np.ndarray] = {}
    ga = np.zeros_like(a)
    gw = np.concatenate([(g * o).sum(axis=-1, keepdims=True) for o in outs], axis=-1)
    for i, (o, c) in enumerate(zip(outs, caches)):
        gai, eg = expert_backward(params, i, c, w[..., i : i + 1] * g)
        ga += gai
        grads.update(eg)
    glog = softmax_rows_vjp(w, gw)
    ga += glog @ fw
    gfw = glog.reshape(-1, glog.shape[-1]).T @ a.reshape(-1, a.shape[-1])
    grads[P + "align.w"] = f_win_cat.T @ gfw
    grads[P + "align.b"] = gfw.sum(axis=0)
    _, agrads = attention_backward(params, P + "attn.", acache, ga)
    grads.update(agrads)
    return grads


def gate(f_img: np.ndarray, f_win_cat: np.ndarray, params) -> np.ndarray:
    """Length-L2 simplex weights for one image."""
    w, _ = gate_forward(params, np.asarray(f_img, dtype=np.float64).reshape(1, -1), f_win_cat)
    return w.reshape(-1)


def enhance(f_img: np.ndarray, w: np.ndarray, params) -> np.ndarray:
    """``1 x C_emb`` weighted sum of expert outputs under given gate weights."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.size != n_experts(params):
        raise DimensionError(f"{w.size} gate weights for {n_experts(params)} experts")
    a, _ = attention_forward(params, P + "attn.", np.asarray(f_img, dtype=np.float64).reshape(1, -1))
    return sum(w[i] * expert_forward(params, i, a)[0] for i in range(w.size))
