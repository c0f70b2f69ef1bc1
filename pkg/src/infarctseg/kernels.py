"""Differentiable NCHW kernels: convolution (standard, atrous, grouped/depthwise),
max pooling, batch normalization, activations and bilinear resampling.

Convolutions run in numba-compiled loops with a fixed summation order per output
element (input channel, kernel row, kernel column, then bias). Work is split over
(batch, channel) pairs and every output element is owned by exactly one chunk, so
results are bit-identical for any worker count.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numba import njit

from .errors import ConfigurationError, DomainError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_workers = 1
_pool: ThreadPoolExecutor | None = None
_pool_lock = threading.Lock()


def set_num_workers(n: int) -> None:
    """Set the number of threads used by the convolution kernels."""
    global _workers, _pool
    if n < 1:
        raise ConfigurationError(f"worker count must be >= 1, got {n}")
    with _pool_lock:
        if _pool is not None and n != _workers:
            _pool.shutdown(wait=True)
            _pool = None
        _workers = int(n)


def get_num_workers() -> int:
    return _workers


def _executor() -> ThreadPoolExecutor:
    global _pool
    with _pool_lock:
        if _pool is None:
            _pool = ThreadPoolExecutor(max_workers=_workers, thread_name_prefix="kernel")
        return _pool


def _dispatch(kernel, total: int, *args) -> None:
    """Run ``kernel(*args, start, stop)`` over ``range(total)`` in contiguous chunks."""
    workers = min(_workers, total)
    if workers <= 1:
        kernel(*args, 0, total)
        return
    bounds = np.linspace(0, total, workers + 1).astype(np.int64)
    futures = [
        _executor().submit(kernel, *args, int(bounds[i]), int(bounds[i + 1]))
        for i in range(workers)
    ]
    for f in futures:
        f.result()


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, pad: int) -> int:
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def same_padding(kernel: int, dilation: int) -> int:
    return dilation * (kernel - 1) // 2


def resolve_padding(padding: str | int, kernel: int, dilation: int) -> int:
    if padding == "same":
        return same_padding(kernel, dilation)
    if padding == "valid":
        return 0
    if isinstance(padding, (int, np.integer)) and padding >= 0:
        return int(padding)
    raise ConfigurationError(f"unknown padding {padding!r}")


@njit(nogil=True, cache=True)
def _valid_range(n_out, stride, offset, size):
    # output indices q with 0 <= q*stride + offset < size
    lo = 0
    if offset < 0:
        lo = (-offset + stride - 1) // stride
    hi = n_out
    last = size - 1 - offset
    if last < 0:
        hi = 0
    else:
        hi = min(n_out, last // stride + 1)
    return lo, max(lo, hi)


@njit(nogil=True, cache=True)
def _conv_fwd_kernel(x, w, b, out, stride, pad, dil, groups, start, stop):
    H = x.shape[2]
    W = x.shape[3]
    O = w.shape[0]
    cg = w.shape[1]
    kh = w.shape[2]
    kw = w.shape[3]
    ho = out.shape[2]
    wo = out.shape[3]
    og = O // groups
    for p in range(start, stop):
        n = p // O
        o = p % O
        g = o // og
        acc = out[n, o]
        for cc in range(cg):
            c = g * cg + cc
            for i in range(kh):
                y_lo, y_hi = _valid_range(ho, stride, i * dil - pad, H)
                for j in range(kw):
                    x_lo, x_hi = _valid_range(wo, stride, j * dil - pad, W)
                    wv = w[o, cc, i, j]
                    for yo in range(y_lo, y_hi):
                        y = yo * stride + i * dil - pad
                        for xo in range(x_lo, x_hi):
                            acc[yo, xo] = acc[yo, xo] + x[n, c, y, xo * stride + j * dil - pad] * wv
        bv = b[o]
        for yo in range(ho):
            for xo in range(wo):
                acc[yo, xo] = acc[yo, xo] + bv


@njit(nogil=True, cache=True)
def _conv_bwd_input_kernel(dout, w, dx, stride, pad, dil, groups, start, stop):
    C = dx.shape[1]
    H = dx.shape[2]
    W = dx.shape[3]
    O = w.shape[0]
    cg = w.shape[1]
    kh = w.shape[2]
    kw = w.shape[3]
    ho = dout.shape[2]
    wo = dout.shape[3]
    og = O // groups
    for p in range(start, stop):
        n = p // C
        c = p % C
        g = c // cg
        cc = c % cg
        acc = dx[n, c]
        for oo in range(og):
            o = g * og + oo
            for i in range(kh):
                y_lo, y_hi = _valid_range(ho, stride, i * dil - pad, H)
                for j in range(kw):
                    x_lo, x_hi = _valid_range(wo, stride, j * dil - pad, W)
                    wv = w[o, cc, i, j]
                    for yo in range(y_lo, y_hi):
                        y = yo * stride + i * dil - pad
                        for xo in range(x_lo, x_hi):
                            xx = xo * stride + j * dil - pad
                            acc[y, xx] = acc[y, xx] + dout[n, o, yo, xo] * wv


@njit(nogil=True, cache=True)
def _conv_bwd_weight_kernel(x, dout, dw, db, stride, pad, dil, groups, start, stop):
    N = x.shape[0]
    H = x.shape[2]
    W = x.shape[3]
    O = dw.shape[0]
    cg = dw.shape[1]
    kh = dw.shape[2]
    kw = dw.shape[3]
    ho = dout.shape[2]
    wo = dout.shape[3]
    og = O // groups
    for o in range(start, stop):
        g = o // og
        for cc in range(cg):
            c = g * cg + cc
            for i in range(kh):
                y_lo, y_hi = _valid_range(ho, stride, i * dil - pad, H)
                for j in range(kw):
                    x_lo, x_hi = _valid_range(wo, stride, j * dil - pad, W)
                    s = 0.0
                    for n in range(N):
                        for yo in range(y_lo, y_hi):
                            y = yo * stride + i * dil - pad
                            for xo in range(x_lo, x_hi):
                                s += dout[n, o, yo, xo] * x[n, c, y, xo * stride + j * dil - pad]
                    dw[o, cc, i, j] = s
        s = 0.0
        for n in range(N):
            for yo in range(ho):
                for xo in range(wo):
                    s += dout[n, o, yo, xo]
        db[o] = s


def _check_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, groups: int) -> None:
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n_out, cg, kh, kw = weight.shape
    if kh != kw:
        raise ConfigurationError(f"kernels must be square, got {kh}x{kw}")
    if groups < 1 or x.shape[1] % groups or n_out % groups:
        raise ConfigurationError(f"groups={groups} does not divide channels {x.shape[1]}/{n_out}")
    if x.shape[1] // groups != cg:
        raise ConfigurationError(
            f"input has {x.shape[1]} channels, weight expects {cg * groups}"
        )
    if bias.shape != (n_out,):
        raise ConfigurationError(f"bias shape {bias.shape} != ({n_out},)")
    if x.shape[2] == 0 or x.shape[3] == 0:
        raise DomainError("convolution over zero-sized spatial input")


def conv2d(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    dilation: int = 1,
    padding: str | int = "same",
    groups: int = 1,
) -> np.ndarray:
    """Atrous (dilated) 2-D cross-correlation with zero padding.

    ``out[n, o, y, x] = sum_{c,i,j} in[n, c, y*s + i*k - p, x*s + j*k - p] * w[o, c, i, j] + b[o]``
    where ``k`` is the dilation rate. ``k = 1`` is ordinary convolution and
    ``groups = C`` gives a depthwise convolution.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    weight = np.ascontiguousarray(weight, dtype=np.float64)
    bias = np.ascontiguousarray(bias, dtype=np.float64)
    _check_conv(x, weight, bias, groups)
    if stride < 1 or dilation < 1:
        raise ConfigurationError("stride and dilation must be >= 1")
    kh, kw = weight.shape[2:]
    pad = resolve_padding(padding, kh, dilation)
    ho = conv_output_size(x.shape[2], kh, stride, dilation, pad)
    wo = conv_output_size(x.shape[3], kw, stride, dilation, pad)
    if ho < 1 or wo < 1:
        raise DomainError(f"input {x.shape[2:]} too small for kernel {kh} at dilation {dilation}")
    out = np.zeros((x.shape[0], weight.shape[0], ho, wo))
    _dispatch(_conv_fwd_kernel, x.shape[0] * weight.shape[0],
              x, weight, bias, out, stride, pad, dilation, groups)
    return out


atrous_conv2d = conv2d


def conv2d_backward(
    dout: np.ndarray,
    x: np.ndarray,
    weight: np.ndarray,
    stride: int = 1,
    dilation: int = 1,
    padding: str | int = "same",
    groups: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients ``(d_input, d_weight, d_bias)`` of :func:`conv2d`."""
    dout = np.ascontiguousarray(dout, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    weight = np.ascontiguousarray(weight, dtype=np.float64)
    pad = resolve_padding(padding, weight.shape[2], dilation)
    dx = np.zeros_like(x)
    dw = np.zeros_like(weight)
    db = np.zeros(weight.shape[0])
    _dispatch(_conv_bwd_input_kernel, x.shape[0] * x.shape[1],
              dout, weight, dx, stride, pad, dilation, groups)
    _dispatch(_conv_bwd_weight_kernel, weight.shape[0],
              x, dout, dw, db, stride, pad, dilation, groups)
    return dx, dw, db


def depthwise_separable_conv(
    x: np.ndarray,
    dw_weight: np.ndarray,
    dw_bias: np.ndarray,
    pw_weight: np.ndarray,
    pw_bias: np.ndarray,
    stride: int = 1,
    dilation: int = 1,
) -> np.ndarray:
    """Bare depthwise -> pointwise composition (no normalization or activation).

    The fused block with batch norm and ReLU after both stages lives in
    :class:`infarctseg.layers.DepthwiseSeparable`.
    """
    if dw_weight.shape[1] != 1 or dw_weight.shape[0] != x.shape[1]:
        raise ConfigurationError("depthwise weight must hold one filter per input channel")
    if pw_weight.shape[2:] != (1, 1):
        raise ConfigurationError("pointwise kernel must be 1x1")
    if pw_weight.shape[1] != dw_weight.shape[0]:
        raise ConfigurationError(
            f"pointwise expects {pw_weight.shape[1]} channels, depthwise emits {dw_weight.shape[0]}"
        )
    mid = conv2d(x, dw_weight, dw_bias, stride, dilation, "same", groups=x.shape[1])
    return conv2d(mid, pw_weight, pw_bias)


# ---------------------------------------------------------------------------
# pooling


def max_pool2d(x: np.ndarray, kernel: int = 3, stride: int = 2, pad: int = 1):
    """Max pooling with -inf padding. Returns ``(out, argmax)``; ties go to the first tap."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, 1, pad)
    wo = conv_output_size(w, kernel, stride, 1, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    taps = np.stack([
        xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
        for i in range(kernel) for j in range(kernel)
    ])
    idx = np.argmax(taps, axis=0)
    out = np.take_along_axis(taps, idx[None], axis=0)[0]
    return out, idx


def max_pool2d_backward(dout, idx, x_shape, kernel: int = 3, stride: int = 2, pad: int = 1):
    n, c, h, w = x_shape
    ho, wo = dout.shape[2:]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for t in range(kernel * kernel):
        i, j = divmod(t, kernel)
        dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
            np.where(idx == t, dout, 0.0)
        )
    return dxp[:, :, pad:pad + h, pad:pad + w]


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
):
    """Per-channel batch normalization.

    In train mode batch statistics are used and the running statistics are
    updated in place (``r <- momentum * r + (1 - momentum) * batch``).
    Returns ``(out, cache)``; ``cache`` is consumed by :func:`batch_norm_backward`.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"gamma/beta must have length {c}")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count == 0:
        raise DomainError("batch norm over an empty batch")
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        unbiased = var * count / max(count - 1, 1)
        running_var *= momentum
        running_var += (1.0 - momentum) * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, train)


def batch_norm_backward(dout: np.ndarray, cache):
    """Returns ``(d_input, d_gamma, d_beta)``."""
    xhat, inv_std, gamma, train = cache
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if not train:
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu6(x: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(x, 0.0), 6.0)


def activation(x: np.ndarray, kind: str = "relu") -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "relu6":
        return relu6(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


def activation_backward(dout: np.ndarray, x: np.ndarray, kind: str = "relu") -> np.ndarray:
    if kind == "relu":
        return np.where(x > 0.0, dout, 0.0)
    if kind == "relu6":
        return np.where((x > 0.0) & (x < 6.0), dout, 0.0)
    raise ConfigurationError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# bilinear resampling (corner-aligned)


def _axis_weights(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_upsample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of the two trailing axes.

    Output corners coincide with input corners, so sample ``i`` of the output
    sits at input coordinate ``i * (in - 1) / (out - 1)``.
    """
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"output extents must be >= 1, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    lo, hi, f = _axis_weights(h, out_h)
    f = f[:, None]
    rows = x[..., lo, :] * (1.0 - f) + x[..., hi, :] * f
    lo, hi, f = _axis_weights(w, out_w)
    return rows[..., lo] * (1.0 - f) + rows[..., hi] * f


def bilinear_upsample_backward(dout: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    out_h, out_w = dout.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return dout.copy()
    lead = dout.shape[:-2]
    lo, hi, f = _axis_weights(in_w, out_w)
    drows = np.zeros(lead + (out_h, in_w))
    np.add.at(drows, (..., lo), dout * (1.0 - f))
    np.add.at(drows, (..., hi), dout * f)
    lo, hi, f = _axis_weights(in_h, out_h)
    f = f[:, None]
    dx = np.zeros(lead + (in_h, in_w))
    np.add.at(dx, (..., lo, slice(None)), drows * (1.0 - f))
    np.add.at(dx, (..., hi, slice(None)), drows * f)
    return dx


def softmax(scores: np.ndarray, axis: int = 1) -> np.ndarray:
    z = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def check_finite(a: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0]
        raise DomainError(f"non-finite value in {where} at index {tuple(int(i) for i in bad)}")


def fan_in_std(fan_in: int) -> float:
    return math.sqrt(2.0 / max(fan_in, 1))
