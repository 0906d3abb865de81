"""Differentiable array operations recorded on the active tape.

Every op computes its forward result eagerly with numpy and, when a tape
is active and some input tracks gradients, registers a closure that pulls
the output gradient and accumulates into the inputs. Convolutions use a
kernel-tap loop (one BLAS contraction per tap) rather than im2col, which
is faster here and avoids the k^2 memory blow-up.

Ops preserve the dtype of their inputs so the same code runs in float32
for training and float64 for finite-difference checking.
"""

from __future__ import annotations

import math
from typing import Optional, Union

import numpy as np
from scipy.special import erf

from .tensor import Tensor, active_tape, as_tensor

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the bad dimension."""


def _track(data: np.ndarray, *inputs: Tensor):
    """Wrap a result; return (out, tape) with tape=None when not recording."""
    tape = active_tape()
    recording = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=recording)
    return out, (tape if recording else None)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: operand shapes {a.shape} != {b.shape}")
    out, tape = _track(a.data + b.data, a, b)
    if tape is not None:
        def backward():
            if a.requires_grad:
                a.accumulate_grad(out.grad)
            if b.requires_grad:
                b.accumulate_grad(out.grad)
        tape.record(out, backward)
    return out


def scale(x: Tensor, factor: Union[float, np.ndarray]) -> Tensor:
    """Multiply by a constant scalar or broadcastable constant array."""
    x = as_tensor(x)
    data = x.data * factor
    if data.shape != x.shape:
        raise ShapeError(f"scale: factor broadcasts {x.shape} to {data.shape}")
    out, tape = _track(data, x)
    if tape is not None:
        def backward():
            x.accumulate_grad(out.grad * factor)
        tape.record(out, backward)
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    out, tape = _track(x.data.reshape(shape), x)
    if tape is not None:
        in_shape = x.shape

        def backward():
            x.accumulate_grad(out.grad.reshape(in_shape))
        tape.record(out, backward)
    return out


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(x * weights) with constant weights (broadcastable to x)."""
    x = as_tensor(x)
    out, tape = _track(np.asarray((x.data * weights).sum(), dtype=x.dtype), x)
    if tape is not None:
        def backward():
            x.accumulate_grad(out.grad * weights)
        tape.record(out, backward)
    return out


def frame_diff(x: Tensor) -> Tensor:
    """Consecutive differences along axis 1: out[:, t] = x[:, t+1] - x[:, t]."""
    x = as_tensor(x)
    if x.shape[1] < 2:
        raise ShapeError(f"frame_diff: axis 1 needs >= 2 entries, got {x.shape[1]}")
    out, tape = _track(x.data[:, 1:] - x.data[:, :-1], x)
    if tape is not None:
        def backward():
            g = np.zeros_like(x.data)
            g[:, 1:] += out.grad
            g[:, :-1] -= out.grad
            x.accumulate_grad(g)
        tape.record(out, backward)
    return out


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out, tape = _track(np.maximum(x.data, 0.0), x)
    if tape is not None:
        mask = x.data > 0

        def backward():
            x.accumulate_grad(out.grad * mask)
        tape.record(out, backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out, tape = _track(_sigmoid(x.data), x)
    if tape is not None:
        s = out.data

        def backward():
            x.accumulate_grad(out.grad * s * (1.0 - s))
        tape.record(out, backward)
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form: x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out, tape = _track(x.data * cdf, x)
    if tape is not None:
        def backward():
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
            x.accumulate_grad(out.grad * (cdf + x.data * pdf))
        tape.record(out, backward)
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # piecewise form avoids exp overflow on large negatives
    pos = z >= 0
    res = np.empty_like(z)
    res[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    res[~pos] = ez / (1.0 + ez)
    return res


# ---------------------------------------------------------------------------
# linear / convolution ops
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[B,D] @ weight[K,D]^T + bias[K]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input dim {x.shape[1]} != weight dim {weight.shape[1]}")
    data = x.data @ weight.data.T
    if bias is not None:
        data = data + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)
    out, tape = _track(data, *inputs)
    if tape is not None:
        def backward():
            g = out.grad
            if x.requires_grad:
                x.accumulate_grad(g @ weight.data)
            if weight.requires_grad:
                weight.accumulate_grad(g.T @ x.data)
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=0))
        tape.record(out, backward)
    return out


def _conv_geometry(h: int, w: int, k: int, stride: int, padding: int,
                   dilation: int = 1) -> tuple[int, int]:
    span = dilation * (k - 1) + 1
    h_out = (h + 2 * padding - span) // stride + 1
    w_out = (w + 2 * padding - span) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv: spatial dims {h}x{w} too small for kernel span {span} "
            f"with padding {padding}")
    return h_out, w_out


def _pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _tap(xp: np.ndarray, i: int, j: int, stride: int, h_out: int, w_out: int):
    return xp[:, :, i:i + stride * (h_out - 1) + 1:stride,
              j:j + stride * (w_out - 1) + 1:stride]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[B,Cin,H,W] with weight[Cout,Cin,k,k]."""
    x, weight = as_tensor(x), as_tensor(weight)
    b_, cin, h, w = x.shape
    cout, cw, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if cw != cin:
        raise ShapeError(
            f"conv2d: input channel dim {cin} != weight channel dim {cw}")
    h_out, w_out = _conv_geometry(h, w, k, stride, padding)

    xp = _pad2d(x.data, padding)
    data = np.zeros((b_, cout, h_out, w_out), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            xs = _tap(xp, i, j, stride, h_out, w_out)
            data += np.tensordot(weight.data[:, :, i, j], xs,
                                 axes=([1], [1])).transpose(1, 0, 2, 3)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(
                f"conv2d: bias shape {bias.shape} != out channel dim ({cout},)")
        data += bias.data[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)
    out, tape = _track(data, *inputs)
    if tape is not None:
        def backward():
            g = out.grad
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if weight.requires_grad and weight.grad is None:
                weight.zero_grad()
            xpb = _pad2d(x.data, padding)
            gxp = np.zeros_like(xpb) if x.requires_grad else None
            for i in range(k):
                for j in range(k):
                    xs = _tap(xpb, i, j, stride, h_out, w_out)
                    if weight.requires_grad:
                        weight.grad[:, :, i, j] += np.tensordot(
                            g, xs, axes=([0, 2, 3], [0, 2, 3]))
                    if gxp is not None:
                        dxs = np.tensordot(g, weight.data[:, :, i, j],
                                           axes=([1], [0]))
                        _tap(gxp, i, j, stride, h_out, w_out)[...] += \
                            dxs.transpose(0, 3, 1, 2)
            if x.requires_grad:
                if padding:
                    x.accumulate_grad(gxp[:, :, padding:padding + h,
                                          padding:padding + w])
                else:
                    x.accumulate_grad(gxp)
        tape.record(out, backward)
    return out


def conv2d_depthwise(x: Tensor, weight: Tensor, stride: int = 1,
                     dilation: int = 1, padding: Optional[int] = None) -> Tensor:
    """Per-channel convolution: weight[C,1,k,k], channel c only sees channel c."""
    x, weight = as_tensor(x), as_tensor(weight)
    b_, c, h, w = x.shape
    cw, one, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d_depthwise: kernel must be odd square, got {k}x{k2}")
    if one != 1:
        raise ShapeError(f"conv2d_depthwise: weight dim 1 must be 1, got {one}")
    if cw != c:
        raise ShapeError(
            f"conv2d_depthwise: channel dim {c} != weight channel dim {cw}")
    if dilation < 1:
        raise ShapeError(f"conv2d_depthwise: dilation must be >= 1, got {dilation}")
    if padding is None:
        padding = dilation * (k - 1) // 2
    h_out, w_out = _conv_geometry(h, w, k, stride, padding, dilation)

    xp = _pad2d(x.data, padding)
    data = np.zeros((b_, c, h_out, w_out), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            xs = _tap(xp, i * dilation, j * dilation, stride, h_out, w_out)
            data += xs * weight.data[None, :, 0, i, j, None, None]
    out, tape = _track(data, x, weight)
    if tape is not None:
        def backward():
            g = out.grad
            if weight.requires_grad and weight.grad is None:
                weight.zero_grad()
            xpb = _pad2d(x.data, padding)
            gxp = np.zeros_like(xpb) if x.requires_grad else None
            for i in range(k):
                for j in range(k):
                    xs = _tap(xpb, i * dilation, j * dilation, stride, h_out, w_out)
                    if weight.requires_grad:
                        weight.grad[:, 0, i, j] += np.einsum(
                            'bchw,bchw->c', g, xs, optimize=True)
                    if gxp is not None:
                        _tap(gxp, i * dilation, j * dilation, stride,
                             h_out, w_out)[...] += \
                            g * weight.data[None, :, 0, i, j, None, None]
            if x.requires_grad:
                if padding:
                    x.accumulate_grad(gxp[:, :, padding:padding + h,
                                          padding:padding + w])
                else:
                    x.accumulate_grad(gxp)
        tape.record(out, backward)
    return out


def conv2d_pointwise(x: Tensor, weight: Tensor,
                     bias: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution: per-pixel linear map across channels."""
    x, weight = as_tensor(x), as_tensor(weight)
    cout, cin, k1, k2 = weight.shape
    if (k1, k2) != (1, 1):
        raise ShapeError(f"conv2d_pointwise: kernel must be 1x1, got {k1}x{k2}")
    if cin != x.shape[1]:
        raise ShapeError(
            f"conv2d_pointwise: input channel dim {x.shape[1]} != weight dim {cin}")
    w2 = weight.data[:, :, 0, 0]
    data = np.tensordot(w2, x.data, axes=([1], [1])).transpose(1, 0, 2, 3)
    if bias is not None:
        data += bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)
    out, tape = _track(data, *inputs)
    if tape is not None:
        def backward():
            g = out.grad
            if x.requires_grad:
                x.accumulate_grad(
                    np.tensordot(g, w2, axes=([1], [0])).transpose(0, 3, 1, 2))
            if weight.requires_grad:
                dw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))
                weight.accumulate_grad(dw[:, :, None, None])
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        tape.record(out, backward)
    return out


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor,
                        eps: float = 1e-6) -> Tensor:
    """Normalize the channel vector at every (b, h, w) location."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm_channels: gamma/beta must have shape ({c},), "
            f"got {gamma.shape} / {beta.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    data = gamma.data[None, :, None, None] * xn + beta.data[None, :, None, None]
    out, tape = _track(data, x, gamma, beta)
    if tape is not None:
        def backward():
            g = out.grad
            if gamma.requires_grad:
                gamma.accumulate_grad(np.einsum('bchw,bchw->c', g, xn,
                                                optimize=True))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gn = g * gamma.data[None, :, None, None]
                m1 = gn.mean(axis=1, keepdims=True)
                m2 = (gn * xn).mean(axis=1, keepdims=True)
                x.accumulate_grad(inv * (gn - m1 - xn * m2))
        tape.record(out, backward)
    return out


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsample of x[B,C,H,W]."""
    x = as_tensor(x)
    b_, c, h, w = x.shape
    data = np.broadcast_to(x.data[:, :, :, None, :, None],
                           (b_, c, h, 2, w, 2)).reshape(b_, c, 2 * h, 2 * w)
    out, tape = _track(np.ascontiguousarray(data), x)
    if tape is not None:
        def backward():
            x.accumulate_grad(
                out.grad.reshape(b_, c, h, 2, w, 2).sum(axis=(3, 5)))
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# distribution ops
# ---------------------------------------------------------------------------

def softmax_temp(x: Tensor, tau: float) -> Tensor:
    """Temperature softmax along the last axis, with max-subtraction."""
    if tau <= 0:
        raise ValueError(f"softmax_temp: tau must be > 0, got {tau}")
    x = as_tensor(x)
    z = x.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out, tape = _track(p, x)
    if tape is not None:
        def backward():
            g = out.grad
            dot = (g * p).sum(axis=-1, keepdims=True)
            x.accumulate_grad((g - dot) * p / tau)
        tape.record(out, backward)
    return out


def kl_div(p: Tensor, q: Tensor, eps: float = 1e-8) -> Tensor:
    """sum p * log((p+eps)/(q+eps)); rows along the last axis are distributions.

    For stacked inputs this is the sum of per-row divergences; callers divide
    by the row count to take means.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_div: shapes {p.shape} != {q.shape} differ")
    for name, t in (("p", p), ("q", q)):
        if np.any(t.data < 0):
            raise ValueError(f"kl_div: {name} has negative entries")
        sums = t.data.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-4):
            raise ValueError(f"kl_div: {name} rows do not sum to 1")
    lp = np.log(p.data + eps)
    lq = np.log(q.data + eps)
    val = np.asarray((p.data * (lp - lq)).sum(), dtype=p.dtype)
    out, tape = _track(val, p, q)
    if tape is not None:
        def backward():
            g = out.grad
            if p.requires_grad:
                p.accumulate_grad(g * ((lp - lq) + p.data / (p.data + eps)))
            if q.requires_grad:
                q.accumulate_grad(g * (-p.data / (q.data + eps)))
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# gating / pooling ops
# ---------------------------------------------------------------------------

def masked_mean_pool(x: Tensor, mask: np.ndarray, eps: float = 1e-8) -> Tensor:
    """Spatial mean of x[B,C,H,W] over a constant {0,1} mask[B,1,H,W]."""
    x = as_tensor(x)
    mask = mask.astype(x.dtype, copy=False)
    if mask.shape != (x.shape[0], 1, x.shape[2], x.shape[3]):
        raise ShapeError(
            f"masked_mean_pool: mask shape {mask.shape} incompatible with {x.shape}")
    den = mask.sum(axis=(2, 3)) + eps            # [B,1]
    num = (x.data * mask).sum(axis=(2, 3))       # [B,C]
    out, tape = _track(num / den, x)
    if tape is not None:
        def backward():
            x.accumulate_grad(
                out.grad[:, :, None, None] * (mask / den[:, :, None, None]))
        tape.record(out, backward)
    return out


def gated_product(gate: Tensor, features: Tensor,
                  base: Optional[Tensor] = None) -> Tensor:
    """gate[B,C] (broadcast over space) * features, optionally * (1 + base).

    The three-factor form is the multiplicative-residual interaction; with
    base=None it degrades to a plain channel gate (ablation switch).
    """
    gate, features = as_tensor(gate), as_tensor(features)
    if gate.shape != features.shape[:2]:
        raise ShapeError(
            f"gated_product: gate shape {gate.shape} != feature channels "
            f"{features.shape[:2]}")
    g4 = gate.data[:, :, None, None]
    if base is None:
        data = g4 * features.data
        out, tape = _track(data, gate, features)
        if tape is not None:
            def backward():
                g = out.grad
                if gate.requires_grad:
                    gate.accumulate_grad((g * features.data).sum(axis=(2, 3)))
                if features.requires_grad:
                    features.accumulate_grad(g * g4)
            tape.record(out, backward)
        return out

    base = as_tensor(base)
    if base.shape != features.shape:
        raise ShapeError(
            f"gated_product: base shape {base.shape} != features {features.shape}")
    onep = 1.0 + base.data
    data = g4 * features.data * onep
    out, tape = _track(data, gate, features, base)
    if tape is not None:
        def backward():
            g = out.grad
            if gate.requires_grad:
                gate.accumulate_grad(
                    (g * features.data * onep).sum(axis=(2, 3)))
            if features.requires_grad:
                features.accumulate_grad(g * g4 * onep)
            if base.requires_grad:
                base.accumulate_grad(g * g4 * features.data)
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# loss kernels
# ---------------------------------------------------------------------------

def focal_loss_map(logits: Tensor, targets: np.ndarray, alpha: float,
                   gamma: float, eps: float = 1e-8) -> Tensor:
    """Elementwise focal binary cross-entropy from logits.

    -alpha*y*(1-p)^gamma*log(p+eps) - (1-alpha)*(1-y)*p^gamma*log(1-p+eps)
    with p = sigmoid(logits); the logs go through log-sigmoid identities so
    saturated logits stay finite.
    """
    logits = as_tensor(logits)
    y = np.asarray(targets)
    if y.shape != logits.shape:
        raise ShapeError(
            f"focal_loss_map: target shape {y.shape} != logits {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("focal_loss_map: targets must be binary {0,1}")
    y = y.astype(logits.dtype, copy=False)

    s = logits.data
    p = _sigmoid(s)
    q = _sigmoid(-s)                       # 1 - p, computed stably
    log_eps = math.log(eps)
    # log(p+eps) = logaddexp(log p, log eps), log p = -softplus(-s)
    logp_eps = np.logaddexp(-np.logaddexp(-s, 0.0), log_eps)
    logq_eps = np.logaddexp(-np.logaddexp(s, 0.0), log_eps)
    pg = p ** gamma
    qg = q ** gamma
    data = -alpha * y * qg * logp_eps - (1.0 - alpha) * (1.0 - y) * pg * logq_eps
    out, tape = _track(data, logits)
    if tape is not None:
        def backward():
            pos = alpha * y * (gamma * p * qg * logp_eps
                               - p * q * qg / (p + eps))
            neg = (1.0 - alpha) * (1.0 - y) * (p * q * pg / (q + eps)
                                               - gamma * q * pg * logq_eps)
            logits.accumulate_grad(out.grad * (pos + neg))
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# non-differentiable / stochastic ops
# ---------------------------------------------------------------------------

def quantile_nearest_rank(values: Union[Tensor, np.ndarray], q: float) -> float:
    """Nearest-rank quantile: sorted[ceil(q*N) - 1]. Constant in backward."""
    if isinstance(values, Tensor):
        values = values.data
    flat = np.asarray(values).reshape(-1)
    if flat.size == 0:
        raise ValueError("quantile_nearest_rank: empty input")
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quantile_nearest_rank: q must be in (0, 1], got {q}")
    rank = math.ceil(q * flat.size)
    return float(np.sort(flat)[rank - 1])


def drop_path(x: Tensor, rate: float, training: bool,
              rng: Optional[np.random.Generator] = None) -> Tensor:
    """Stochastic depth: per-sample branch drop with 1/(1-rate) rescale."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop_path: rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("drop_path: training mode with rate > 0 needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape[0]) < keep).astype(x.dtype) / keep
    mask = mask.reshape((x.shape[0],) + (1,) * (x.data.ndim - 1))
    return scale(x, mask)
