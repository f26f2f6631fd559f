"""Differentiable operations over Tensors.

Exactly the op set the classifier needs: affine layers, 3x3 convolution,
elementwise activations, pooling/reductions, and the two fused loss kernels
(multi-label BCE on logits, diagonal-Gaussian KL). Every op validates shapes,
rejects non-finite outputs, and registers an explicit vector-Jacobian closure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor, from_op


@dataclass
class GaussianLatent:
    """Mean and log-variance of a fully factorized Gaussian latent.

    Shapes are either (n,) for a single distribution or (B, n) for a batch.
    """

    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise DimensionError(
                f"mu shape {self.mu.shape} != log_var shape {self.log_var.shape}"
            )


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise DimensionError(msg)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"add: {a.shape} vs {b.shape}")
    return from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"sub: {a.shape} vs {b.shape}")
    return from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, f"mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return from_op(a.data * s, (a,), lambda g: (g * s,), "scale")


def neg(a: Tensor) -> Tensor:
    return from_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as a NonFiniteError
        out = np.exp(a.data)
    return from_op(out, (a,), lambda g: (g * out,), "exp")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    # pass-through gradient strictly inside the interval, zero at/outside it
    return from_op(out, (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    out = _softplus(a.data)
    sig = _sigmoid(a.data)
    return from_op(out, (a,), lambda g: (g * sig,), "softplus")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# ---------------------------------------------------------------------------
# affine / convolution


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """out[i,o] = sum_k x[i,k] * w[o,k] + b[o]."""
    _require(x.ndim == 2 and w.ndim == 2 and b.ndim == 1, "linear: bad ranks")
    _require(
        x.shape[1] == w.shape[1] and w.shape[0] == b.shape[0],
        f"linear: x{x.shape} w{w.shape} b{b.shape}",
    )
    xd, wd = x.data, w.data
    out = xd @ wd.T + b.data

    def vjp(g):
        dx = g @ wd if x.requires_grad else None
        dw = g.T @ xd if w.requires_grad else None
        db = g.sum(axis=0) if b.requires_grad else None
        return dx, dw, db

    return from_op(out, (x, w, b), vjp, "linear")


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """3x3 cross-correlation with zero padding and optional channel bias."""
    _require(x.ndim == 4 and k.ndim == 4, "conv2d: bad ranks")
    _require(k.shape[2] == 3 and k.shape[3] == 3, "conv2d: kernels must be 3x3")
    _require(stride in (1, 2), "conv2d: stride must be 1 or 2")
    _require(pad in (0, 1), "conv2d: pad must be 0 or 1")
    B, C, H, W = x.shape
    F, Ck = k.shape[0], k.shape[1]
    _require(C == Ck, f"conv2d: input channels {C} != kernel channels {Ck}")
    _require(H >= 3 and W >= 3, "conv2d: spatial dims must be >= 3")
    if b is not None:
        _require(b.shape == (F,), f"conv2d: bias {b.shape} != ({F},)")

    out_h = (H + 2 * pad - 3) // stride + 1
    out_w = (W + 2 * pad - 3) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, out_h, out_w, stride)  # (B*P, C*9)
    wmat = k.data.reshape(F, C * 9)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(B, out_h, out_w, F).transpose(0, 3, 1, 2)

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, F)
        dk = (gmat.T @ cols).reshape(k.shape) if k.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = gmat @ wmat
            dxp = _col2im(dcols, (B, C, xp.shape[2], xp.shape[3]), out_h, out_w, stride)
            dx = dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp
        db = gmat.sum(axis=0) if b is not None and b.requires_grad else None
        return (dx, dk, db) if b is not None else (dx, dk)

    parents = (x, k, b) if b is not None else (x, k)
    return from_op(out, parents, vjp, "conv2d")


def _im2col(xp: np.ndarray, out_h: int, out_w: int, stride: int) -> np.ndarray:
    B, C, Hp, Wp = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, out_h, out_w, C, 3, 3),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
    )
    return win.reshape(B * out_h * out_w, C * 9)


def _col2im(dcols: np.ndarray, xp_shape, out_h: int, out_w: int, stride: int) -> np.ndarray:
    B, C, Hp, Wp = xp_shape
    dxp = np.zeros(xp_shape, dtype=np.float64)
    # one contiguous repack, then contiguous-source scatter-adds per tap
    d = np.ascontiguousarray(
        dcols.reshape(B, out_h, out_w, C, 3, 3).transpose(4, 5, 0, 3, 1, 2)
    )
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += d[i, j]
    return dxp


# ---------------------------------------------------------------------------
# pooling / shape / reductions


def avg_pool2d(x: Tensor, window: int = 2) -> Tensor:
    _require(x.ndim == 4, "avg_pool2d: expects (B,C,H,W)")
    _require(window == 2, "avg_pool2d: only window 2 supported")
    B, C, H, W = x.shape
    _require(H % 2 == 0 and W % 2 == 0, "avg_pool2d: H and W must be even")
    v = x.data.reshape(B, C, H // 2, 2, W // 2, 2)
    out = v.mean(axis=(3, 5))

    def vjp(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx,)

    return from_op(out, (x,), vjp, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    _require(x.ndim == 4, "global_avg_pool: expects (B,C,H,W)")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))
    inv = 1.0 / (H * W)

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, x.shape).copy(),)

    return from_op(out, (x,), vjp, "global_avg_pool")


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    _require(a.ndim == b.ndim, "concat: rank mismatch")
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"concat: axis {axis} out of range for rank {a.ndim}")
    axis %= a.ndim
    for d in range(a.ndim):
        if d != axis:
            _require(a.shape[d] == b.shape[d], f"concat: {a.shape} vs {b.shape} on axis {d}")
    na = a.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def vjp(g):
        ga, gb = np.split(g, [na], axis=axis)
        return ga, gb

    return from_op(out, (a, b), vjp, "concat")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _require(x.ndim == 2, "slice_cols: expects a 2-D tensor")
    _require(0 <= start < stop <= x.shape[1], f"slice_cols: [{start},{stop}) in {x.shape}")
    out = x.data[:, start:stop].copy()

    def vjp(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        gx[:, start:stop] = g
        return (gx,)

    return from_op(out, (x,), vjp, "slice_cols")


def element(x: Tensor, index: tuple[int, ...]) -> Tensor:
    """Pick one scalar entry, keeping it on the tape."""
    _require(len(index) == x.ndim, "element: index rank mismatch")
    out = np.asarray(x.data[index], dtype=np.float64)

    def vjp(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        gx[index] = g
        return (gx,)

    return from_op(out, (x,), vjp, "element")


def mean(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(), dtype=np.float64)
    inv = 1.0 / x.size

    def vjp(g):
        return (np.full(x.shape, g * inv),)

    return from_op(out, (x,), vjp, "mean")


def tsum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=np.float64)

    def vjp(g):
        return (np.full(x.shape, g),)

    return from_op(out, (x,), vjp, "sum")


# ---------------------------------------------------------------------------
# fused loss kernels


def bce_with_logits(logits: Tensor, y) -> Tensor:
    """Mean over all entries of softplus(logit) - y*logit, y in {0,1}."""
    yd = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    _require(logits.shape == yd.shape, f"bce: logits {logits.shape} vs targets {yd.shape}")
    if not np.isin(yd, (0.0, 1.0)).all():
        raise DimensionError("bce: targets must be 0 or 1")
    n = logits.size
    ld = logits.data
    out = np.asarray((_softplus(ld) - yd * ld).mean(), dtype=np.float64)

    def vjp(g):
        return (g * (_sigmoid(ld) - yd) / n,)

    return from_op(out, (logits,), vjp, "bce_with_logits")


def gaussian_kl(q: GaussianLatent, p: GaussianLatent) -> Tensor:
    """KL divergence between factorized Gaussians given as log-variances.

    Per distribution the value is sum_d 0.5*(expm1(t) - t + d^2*exp(-lv_p))
    with t = lv_q - lv_p and d = mu_q - mu_p, which is the usual closed form
    rearranged so every term is non-negative and exp never sees |x| > 60 for
    log-variances within the clamped range. Batched (B, n) inputs return the
    batch mean of per-sample sums so the value is batch-size independent.
    """
    _require(q.mu.shape == p.mu.shape, f"kl: q {q.mu.shape} vs p {p.mu.shape}")
    _require(q.mu.ndim in (1, 2), "kl: latents must be (n,) or (B,n)")
    mu_q, lv_q, mu_p, lv_p = q.mu, q.log_var, p.mu, p.log_var
    t = lv_q.data - lv_p.data
    d = mu_q.data - mu_p.data
    inv_var_p = np.exp(-lv_p.data)
    elem = 0.5 * (np.expm1(t) - t + d * d * inv_var_p)
    if q.mu.ndim == 2:
        batch = q.mu.shape[0]
        out = np.asarray(elem.sum() / batch, dtype=np.float64)
        w = 1.0 / batch
    else:
        out = np.asarray(elem.sum(), dtype=np.float64)
        w = 1.0

    def vjp(g):
        c = g * w
        et = np.exp(t)
        g_mu_q = c * d * inv_var_p
        g_lv_q = c * 0.5 * (et - 1.0)
        g_lv_p = c * 0.5 * (1.0 - et - d * d * inv_var_p)
        return g_mu_q, g_lv_q, -g_mu_q, g_lv_p

    return from_op(out, (mu_q, lv_q, mu_p, lv_p), vjp, "gaussian_kl")


def gaussian_kl_standard(q: GaussianLatent) -> Tensor:
    """KL(q || N(0, I)) through the textbook identity 0.5*(mu^2+var-lv-1).

    Independent code path from gaussian_kl; the two agree to float64
    round-off and are cross-checked in tests.
    """
    _require(q.mu.ndim in (1, 2), "kl: latents must be (n,) or (B,n)")
    mu, lv = q.mu, q.log_var
    var = np.exp(lv.data)
    elem = 0.5 * (mu.data * mu.data + var - lv.data - 1.0)
    if mu.ndim == 2:
        batch = mu.shape[0]
        out = np.asarray(elem.sum() / batch, dtype=np.float64)
        w = 1.0 / batch
    else:
        out = np.asarray(elem.sum(), dtype=np.float64)
        w = 1.0

    def vjp(g):
        c = g * w
        return c * mu.data, c * 0.5 * (var - 1.0)

    return from_op(out, (mu, lv), vjp, "gaussian_kl_standard")
