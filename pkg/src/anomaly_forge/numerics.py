"""Dense float64 array ops with hand-written vector-Jacobian products.

Arrays are plain ``numpy.ndarray`` objects of dtype float64. Every op ``f``
has a companion ``f_vjp`` that maps an output cotangent back to input
cotangents. Ops that act on images accept arbitrary leading batch axes, so
the same code serves single samples and mini-batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes are incompatible with an op."""


class UnsupportedError(ValueError):
    """Raised for a request outside what an op supports (e.g. downscaling)."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver fails to meet its tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


def as_tensor(x: Any, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a float64 array, rejecting NaN/Inf and empty input."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        raise DimensionError(f"{name}: empty array with shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# Elementwise / linear
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def matmul_vjp(a: np.ndarray, b: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ga = g @ b.T
    gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return ga, gb


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ w + b`` over the last axis of ``x``."""
    return matmul(x, w) + b


def linear_vjp(x, w, b, g):
    gx, gw = matmul_vjp(x, w, g)
    gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return gx, gw, gb


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_vjp(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max-subtraction."""
    if logits.size == 0 or logits.ndim == 0 or logits.shape[-1] < 1:
        raise DimensionError(f"softmax_rows: empty input with shape {np.shape(logits)}")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_vjp(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Adjoint of softmax given its output ``y``."""
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Convolutions (cross-correlation, channels-last)
# ---------------------------------------------------------------------------


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 3) + [(padding, padding), (padding, padding), (0, 0)]
    return np.pad(x, widths)


def _check_conv(x_shape, kh, kw, stride, padding, op):
    if stride < 1 or padding < 0:
        raise ValueError(f"{op}: stride must be >= 1 and padding >= 0")
    h, w = x_shape[-3], x_shape[-2]
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(
            f"{op}: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    return _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation of ``x[..., h, w, cin]`` with ``kernel[kh, kw, cin, cout]``.

    Products are accumulated in (kernel row, kernel col, input channel) order,
    one term at a time, so results match a scalar loop in that order bit for bit.
    """
    if x.ndim < 3 or kernel.ndim != 4 or x.shape[-1] != kernel.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    ho, wo = _check_conv(x.shape, kh, kw, stride, padding, "conv2d")
    xp = _pad_hw(x, padding)
    out = np.zeros(x.shape[:-3] + (ho, wo, cout))
    for di in range(kh):
        for dj in range(kw):
            window = xp[..., di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride, :]
            for ci in range(cin):
                out += window[..., ci, None] * kernel[di, dj, ci]
    return out


def conv2d_vjp(x, kernel, g, stride: int = 1, padding: int = 0):
    kh, kw, cin, cout = kernel.shape
    ho, wo = g.shape[-3], g.shape[-2]
    xp = _pad_hw(x, padding)
    gxp = np.zeros_like(xp)
    gk = np.zeros_like(kernel)
    g2 = g.reshape(-1, cout)
    for di in range(kh):
        for dj in range(kw):
            rs = slice(di, di + stride * (ho - 1) + 1, stride)
            cs = slice(dj, dj + stride * (wo - 1) + 1, stride)
            window = xp[..., rs, cs, :]
            gk[di, dj] = window.reshape(-1, cin).T @ g2
            gxp[..., rs, cs, :] += g @ kernel[di, dj].T
    if padding:
        gxp = gxp[..., padding:-padding, padding:-padding, :]
    return gxp, gk


def depthwise_conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Per-channel cross-correlation of ``x[..., h, w, c]`` with ``kernel[kh, kw, c]``."""
    if x.ndim < 3 or kernel.ndim != 3 or x.shape[-1] != kernel.shape[2]:
        raise DimensionError(
            f"depthwise_conv2d: input {x.shape} incompatible with kernel {kernel.shape}"
        )
    kh, kw, _ = kernel.shape
    ho, wo = _check_conv(x.shape, kh, kw, stride, padding, "depthwise_conv2d")
    xp = _pad_hw(x, padding)
    out = np.zeros(x.shape[:-3] + (ho, wo, x.shape[-1]))
    for di in range(kh):
        for dj in range(kw):
            out += xp[..., di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride, :] * kernel[di, dj]
    return out


def depthwise_conv2d_vjp(x, kernel, g, stride: int = 1, padding: int = 0):
    kh, kw, c = kernel.shape
    ho, wo = g.shape[-3], g.shape[-2]
    xp = _pad_hw(x, padding)
    gxp = np.zeros_like(xp)
    gk = np.zeros_like(kernel)
    for di in range(kh):
        for dj in range(kw):
            rs = slice(di, di + stride * (ho - 1) + 1, stride)
            cs = slice(dj, dj + stride * (wo - 1) + 1, stride)
            gk[di, dj] = (xp[..., rs, cs, :] * g).reshape(-1, c).sum(axis=0)
            gxp[..., rs, cs, :] += g * kernel[di, dj]
    if padding:
        gxp = gxp[..., padding:-padding, padding:-padding, :]
    return gxp, gk


def depthwise_separable_conv2d(x, depth_kernel, point_kernel, padding: int | None = None):
    """Depthwise spatial filtering followed by 1x1 channel mixing.

    ``padding`` defaults to "same" for odd kernels.
    """
    if point_kernel.ndim != 4 or point_kernel.shape[:2] != (1, 1):
        raise DimensionError(f"point kernel must be 1x1xCxCout, got {point_kernel.shape}")
    if depth_kernel.ndim != 3 or depth_kernel.shape[2] != point_kernel.shape[2]:
        raise DimensionError(
            f"channel mismatch: depth kernel {depth_kernel.shape}, point kernel {point_kernel.shape}"
        )
    if padding is None:
        padding = depth_kernel.shape[0] // 2
    return conv2d(depthwise_conv2d(x, depth_kernel, 1, padding), point_kernel)


def depthwise_separable_conv2d_vjp(x, depth_kernel, point_kernel, g, padding: int | None = None):
    if padding is None:
        padding = depth_kernel.shape[0] // 2
    mid = depthwise_conv2d(x, depth_kernel, 1, padding)
    gmid, gp = conv2d_vjp(mid, point_kernel, g)
    gx, gd = depthwise_conv2d_vjp(x, depth_kernel, gmid, 1, padding)
    return gx, gd, gp


# ---------------------------------------------------------------------------
# Resampling and pooling
# ---------------------------------------------------------------------------


def _bilinear_taps(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    i0, i1, t = _bilinear_taps(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def bilinear_upsample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Upsample ``x[..., h, w]`` with half-pixel-centre sampling and edge clamping.

    Uses the ``a + t * (b - a)`` form so equal neighbours reproduce their
    value exactly.
    """
    h, w = x.shape[-2], x.shape[-1]
    if out_h < h or out_w < w:
        raise UnsupportedError(f"bilinear_upsample: cannot downscale {h}x{w} to {out_h}x{out_w}")
    r0, r1, rt = _bilinear_taps(h, out_h)
    a = x[..., r0, :]
    rows = a + rt[:, None] * (x[..., r1, :] - a)
    c0, c1, ct = _bilinear_taps(w, out_w)
    b = rows[..., c0]
    return b + ct * (rows[..., c1] - b)


def bilinear_upsample_vjp(x_shape, out_h: int, out_w: int, g: np.ndarray) -> np.ndarray:
    h, w = x_shape[-2], x_shape[-1]
    mh = _interp_matrix(h, out_h)
    mw = _interp_matrix(w, out_w)
    return mh.T @ g @ mw


def _adaptive_bins(n_in: int, n_out: int):
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def adaptive_avg_pool2d(x: np.ndarray, grid: int) -> np.ndarray:
    """Average ``x[..., h, w, c]`` over a ``grid x grid`` set of (possibly overlapping) bins."""
    h, w = x.shape[-3], x.shape[-2]
    out = np.empty(x.shape[:-3] + (grid, grid, x.shape[-1]))
    for i, (r0, r1) in enumerate(_adaptive_bins(h, grid)):
        for j, (c0, c1) in enumerate(_adaptive_bins(w, grid)):
            out[..., i, j, :] = x[..., r0:r1, c0:c1, :].mean(axis=(-3, -2))
    return out


def adaptive_avg_pool2d_vjp(x_shape, grid: int, g: np.ndarray) -> np.ndarray:
    h, w = x_shape[-3], x_shape[-2]
    gx = np.zeros(x_shape)
    for i, (r0, r1) in enumerate(_adaptive_bins(h, grid)):
        for j, (c0, c1) in enumerate(_adaptive_bins(w, grid)):
            n = (r1 - r0) * (c1 - c0)
            gx[..., r0:r1, c0:c1, :] += g[..., i, j, :][..., None, None, :] / n
    return gx


# ---------------------------------------------------------------------------
# Conjugate gradient
# ---------------------------------------------------------------------------


def cg_solve(
    apply_A: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 10_000,
) -> tuple[np.ndarray, int]:
    """Solve ``A x = b`` for symmetric positive definite ``A`` given as a callable.

    Returns ``(x, iterations)`` with ``||A x - b|| <= tol * max(1, ||b||)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    target = tol * max(1.0, float(np.linalg.norm(b)))
    x = np.zeros_like(b)
    r = b.copy()
    rr = float(r @ r)
    if np.sqrt(rr) <= target:
        return x, 0
    p = r.copy()
    for it in range(1, max_iter + 1):
        ap = apply_A(p)
        pap = float(p @ ap)
        if pap <= 0:
            raise ConvergenceError("cg_solve: operator is not positive definite", np.sqrt(rr), it)
        alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        rr_new = float(r @ r)
        if np.sqrt(rr_new) <= target:
            # recursive residual can drift; confirm against the true one
            true_res = float(np.linalg.norm(apply_A(x) - b))
            if true_res <= target:
                return x, it
            r = b - apply_A(x)
            rr_new = float(r @ r)
            p = r.copy()
            rr = rr_new
            continue
        p = r + (rr_new / rr) * p
        rr = rr_new
    res = float(np.linalg.norm(apply_A(x) - b))
    raise ConvergenceError(
        f"cg_solve: no convergence in {max_iter} iterations (residual {res:.3e})", res, max_iter
    )


# ---------------------------------------------------------------------------
# Adjoint records and finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class AdjointRecord:
    """One evaluated op: its inputs, output, and a bound vjp."""

    name: str
    inputs: tuple[np.ndarray, ...]
    output: np.ndarray
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]]
    forward: Callable[..., np.ndarray] = field(repr=False)


def _registry() -> dict[str, tuple[Callable, Callable]]:
    # vjp callables take (inputs, output, g, **params) and return a tuple of cotangents
    return {
        "matmul": (matmul, lambda ins, out, g: matmul_vjp(*ins, g)),
        "linear": (linear, lambda ins, out, g: linear_vjp(*ins, g)),
        "relu": (relu, lambda ins, out, g: (relu_vjp(ins[0], g),)),
        "softmax_rows": (softmax_rows, lambda ins, out, g: (softmax_rows_vjp(out, g),)),
        "conv2d": (
            conv2d,
            lambda ins, out, g, stride=1, padding=0: conv2d_vjp(*ins, g, stride, padding),
        ),
        "depthwise_conv2d": (
            depthwise_conv2d,
            lambda ins, out, g, stride=1, padding=0: depthwise_conv2d_vjp(*ins, g, stride, padding),
        ),
        "depthwise_separable_conv2d": (
            depthwise_separable_conv2d,
            lambda ins, out, g, padding=None: depthwise_separable_conv2d_vjp(*ins, g, padding),
        ),
        "bilinear_upsample": (
            lambda x, out_h, out_w: bilinear_upsample(x, out_h, out_w),
            lambda ins, out, g, out_h, out_w: (bilinear_upsample_vjp(ins[0].shape, out_h, out_w, g),),
        ),
        "adaptive_avg_pool2d": (
            lambda x, grid: adaptive_avg_pool2d(x, grid),
            lambda ins, out, g, grid: (adaptive_avg_pool2d_vjp(ins[0].shape, grid, g),),
        ),
    }


OPS = _registry()


def record(name: str, *inputs: np.ndarray, **params) -> AdjointRecord:
    """Evaluate a registered op and bind its vjp."""
    fn, vjp = OPS[name]
    ins = tuple(as_tensor(x, f"{name} input") for x in inputs)
    out = fn(*ins, **params)

    def forward(*xs):
        return fn(*xs, **params)

    return AdjointRecord(name, ins, out, lambda g: tuple(vjp(ins, out, g, **params)), forward)


def record_custom(name, forward, vjp, *inputs) -> AdjointRecord:
    """Wrap an arbitrary differentiable function ``forward(*inputs)`` with its vjp."""
    ins = tuple(np.asarray(x, dtype=np.float64) for x in inputs)
    out = np.asarray(forward(*ins), dtype=np.float64)
    return AdjointRecord(name, ins, out, lambda g: tuple(vjp(*ins, g)), forward)


def vjp_check(op: AdjointRecord, probe_seed: int) -> float:
    """Max relative gap between the recorded vjp and central finite differences.

    A random output cotangent ``u`` turns the op into the scalar ``<u, f(x)>``;
    each input element is perturbed by ``1e-6 * max(1, |x|)``. The error per
    input is ``max|fd - vjp| / max(max|fd|, max|vjp|)``.
    """
    rng = np.random.default_rng(probe_seed)
    u = rng.standard_normal(np.shape(op.output))
    analytic = op.vjp(u)
    worst = 0.0
    for k, x in enumerate(op.inputs):
        numeric = np.zeros_like(x)
        flat = numeric.reshape(-1)
        for idx in range(x.size):
            v = x.reshape(-1)[idx]
            h = 1e-6 * max(1.0, abs(v))
            xp, xm = x.copy(), x.copy()
            xp.reshape(-1)[idx] = v + h
            xm.reshape(-1)[idx] = v - h
            step = xp.reshape(-1)[idx] - xm.reshape(-1)[idx]
            args_p = list(op.inputs)
            args_p[k] = xp
            args_m = list(op.inputs)
            args_m[k] = xm
            fp = float(np.sum(u * op.forward(*args_p)))
            fm = float(np.sum(u * op.forward(*args_m)))
            flat[idx] = (fp - fm) / step
        worst = max(worst, relative_error(numeric, analytic[k]))
    return worst


def relative_error(numeric: np.ndarray, analytic: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), float(np.max(np.abs(analytic), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(numeric - analytic))) / scale


def directional_check(
    loss: Callable[[], float],
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    seed: int,
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Compare analytic directional derivatives with central differences.

    For each parameter array a random unit direction ``d`` is drawn and the
    array is perturbed in place by ``+-h d``. Returns the max relative gap.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        d = rng.standard_normal(p.shape)
        d /= np.linalg.norm(d)
        base = p.copy()
        p[...] = base + h * d
        fp = loss()
        p[...] = base - h * d
        fm = loss()
        p[...] = base
        numeric = (fp - fm) / (2 * h)
        analytic = float(np.sum(g * d))
        scale = max(abs(numeric), abs(analytic), floor)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst
