"""Neural-network primitives built on :mod:`mplab.tensor`.

All image tensors use NCHW layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from numbers import Integral, Real
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, mean, record, scale, sub, sum_

BCE_FLOOR = 1e-12
DEFAULT_CDC_THETA = 0.7


@dataclass
class ConvParams:
    weight: Tensor  # (out_channels, in_channels, kh, kw)
    bias: Optional[Tensor] = None  # (out_channels,)
    stride: int = 1
    padding: int = 0
    cdc_theta: float = 0.0


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = True
    # Train-mode passes may use batch statistics without touching the running
    # averages (needed when the owning network is frozen).
    update_stats: bool = True


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        return 0
    return span // stride + 1


def _check_conv(x: Tensor, p: ConvParams) -> tuple:
    if x.ndim != 4:
        raise ValueError(f"conv input must be (N,C,H,W), got {x.shape}")
    O, C, kh, kw = p.weight.shape
    if x.shape[1] != C:
        raise ValueError(f"conv expects {C} input channels, got {x.shape[1]}")
    if p.stride < 1 or p.padding < 0:
        raise ValueError(f"invalid stride {p.stride} / padding {p.padding}")
    Ho = _out_size(x.shape[2], kh, p.stride, p.padding)
    Wo = _out_size(x.shape[3], kw, p.stride, p.padding)
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"conv output size is not positive for input {x.shape} and kernel {kh}x{kw}")
    if p.bias is not None and p.bias.shape != (O,):
        raise ValueError(f"bias shape {p.bias.shape} does not match {O} output channels")
    return O, C, kh, kw, Ho, Wo


def _strided(a: np.ndarray, i: int, j: int, s: int, Ho: int, Wo: int) -> np.ndarray:
    """View of ``a[..., i + s*y, j + s*x]`` for y < Ho, x < Wo."""
    return a[..., i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s]


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    Per-sample GEMMs in channels-first layout. A 3x3 kernel either gathers the
    input windows (cheap when in_channels is small) or multiplies first and
    scatters the shifted partial outputs (cheap when out_channels is small).
    """
    if p.cdc_theta:
        return cdc2d(x, p)
    O, C, kh, kw, Ho, Wo = _check_conv(x, p)
    N, _, H, W = x.shape
    s, pad = p.stride, p.padding
    w, b = p.weight, p.bias
    dt = x.dtype
    wd = w.data.astype(dt, copy=False)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    Hp, Wp = H + 2 * pad, W + 2 * pad
    P = Ho * Wo
    pointwise = kh == 1 and kw == 1
    gather = not pointwise and C <= O
    if pointwise:
        xs = xp if s == 1 else _strided(xp, 0, 0, s, Ho, Wo)
        cols = np.ascontiguousarray(xs).reshape(N, C, P)
        y = wd.reshape(O, C) @ cols
        y = y.reshape(N, O, Ho, Wo)
    elif gather:
        cols = np.empty((N, C, kh, kw, Ho, Wo), dtype=dt)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = _strided(xp, i, j, s, Ho, Wo)
        cols = cols.reshape(N, C * kh * kw, P)
        y = (wd.reshape(O, -1) @ cols).reshape(N, O, Ho, Wo)
    else:
        cols = None
        wall = np.ascontiguousarray(wd.transpose(2, 3, 0, 1)).reshape(kh * kw * O, C)
        z = (wall @ xp.reshape(N, C, Hp * Wp)).reshape(N, kh, kw, O, Hp, Wp)
        y = _strided(z[:, 0, 0], 0, 0, s, Ho, Wo).copy()
        for i in range(kh):
            for j in range(kw):
                if i or j:
                    y += _strided(z[:, i, j], i, j, s, Ho, Wo)
    if b is not None:
        y += b.data.astype(dt, copy=False).reshape(1, O, 1, 1)
    inputs = (x, w) if b is None else (x, w, b)

    def fn(g):
        g3 = g.reshape(N, O, P)
        gx = gw = gb = None
        if w.requires_grad:
            if cols is not None:
                gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            else:
                # Place g at every kernel offset of the padded grid, then contract with xp.
                gfull = np.zeros((N, O, kh, kw, Hp, Wp), dtype=dt)
                for i in range(kh):
                    for j in range(kw):
                        _strided(gfull[:, :, i, j], i, j, s, Ho, Wo)[...] = g
                m = np.matmul(gfull.reshape(N, O * kh * kw, Hp * Wp), xp.reshape(N, C, Hp * Wp).transpose(0, 2, 1))
                gw = m.sum(axis=0).reshape(O, kh, kw, C).transpose(0, 3, 1, 2).copy()
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            if pointwise:
                u = (wd.reshape(O, C).T @ g3).reshape(N, C, Ho, Wo)
                if s == 1:
                    gxp = u
                else:
                    gxp = np.zeros((N, C, Hp, Wp), dtype=dt)
                    _strided(gxp, 0, 0, s, Ho, Wo)[...] = u
            elif s == 1 and O < C and kh - 1 - pad >= 0:
                # Full correlation of the padded output gradient with the flipped kernel.
                q = kh - 1 - pad
                gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q)))
                gcols = np.empty((N, O, kh, kw, H, W), dtype=dt)
                for i in range(kh):
                    for j in range(kw):
                        gcols[:, :, i, j] = gp[:, :, kh - 1 - i : kh - 1 - i + H, kw - 1 - j : kw - 1 - j + W]
                gx = (wd.transpose(1, 0, 2, 3).reshape(C, -1) @ gcols.reshape(N, -1, H * W)).reshape(N, C, H, W)
                gxp = None
            else:
                wt = np.ascontiguousarray(wd.transpose(2, 3, 1, 0)).reshape(kh * kw * C, O)
                u = (wt @ g3).reshape(N, kh, kw, C, Ho, Wo)
                gxp = np.zeros((N, C, Hp, Wp), dtype=dt)
                for i in range(kh):
                    for j in range(kw):
                        _strided(gxp, i, j, s, Ho, Wo)[...] += u[:, i, j]
            if gxp is not None:
                gx = np.ascontiguousarray(gxp[:, :, pad : pad + H, pad : pad + W]) if pad else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    return record(y, inputs, fn)


def cdc2d(x: Tensor, p: ConvParams) -> Tensor:
    """Central-difference convolution.

    ``y(p0) = sum_n w(pn) x(p0 + pn) - theta * x(p0) * sum_n w(pn) + bias``.
    The second term is a 1x1 convolution of the window centres with the
    spatially summed kernel, so the result is differentiable through the
    ordinary primitives.
    """
    theta = p.cdc_theta
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"cdc_theta must lie in [0, 1], got {theta}")
    base = ConvParams(p.weight, p.bias, p.stride, p.padding, 0.0)
    if theta == 0.0:
        return conv2d(x, base)
    O, C, kh, kw, Ho, Wo = _check_conv(x, base)
    if kh != kw or kh % 2 == 0 or p.padding != kh // 2:
        raise ValueError("cdc2d needs an odd square kernel with 'same' padding (k // 2)")
    y = conv2d(x, base)
    centre = conv2d(x, ConvParams(sum_(p.weight, axis=(2, 3), keepdims=True), None, p.stride, 0))
    return sub(y, scale(centre, theta))


def _channel_sum(a: np.ndarray) -> np.ndarray:
    """Sum over every axis except 1, reducing the contiguous trailing axes first."""
    if a.ndim == 2:
        return a.sum(axis=0)
    return a.reshape(a.shape[0], a.shape[1], -1).sum(axis=2).sum(axis=0)


def batchnorm(x: Tensor, p: BatchNormParams) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Running variance is tracked with the unbiased batch variance; the
    normalization itself uses the biased one.
    """
    if x.ndim not in (2, 4):
        raise ValueError(f"batchnorm expects (N,C) or (N,C,H,W), got {x.shape}")
    Cn = x.shape[1]
    if p.gamma.shape != (Cn,) or p.beta.shape != (Cn,):
        raise ValueError(f"batchnorm parameters do not match {Cn} channels")
    bshape = (1, Cn) if x.ndim == 2 else (1, Cn, 1, 1)
    gamma, beta = p.gamma, p.beta
    xd = x.data
    dt = xd.dtype.type
    M = xd.size // Cn
    if p.training:
        if M <= 1:
            raise ValueError("batch statistics need more than one value per channel in train mode")
        mu = _channel_sum(xd) / dt(M)
        xc = xd - mu.reshape(bshape)
        var = _channel_sum(xc * xc) / dt(M)
        if p.update_stats:
            m = p.momentum
            p.running_mean[...] = (1 - m) * p.running_mean + m * mu
            p.running_var[...] = (1 - m) * p.running_var + m * var * (M / (M - 1))
    else:
        mu = p.running_mean.astype(xd.dtype, copy=False)
        var = p.running_var.astype(xd.dtype, copy=False)
        xc = xd - mu.reshape(bshape)
    invstd = (dt(1) / np.sqrt(var + dt(p.eps))).astype(xd.dtype)
    xhat = xc * invstd.reshape(bshape)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    training = p.training

    def fn(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = _channel_sum(g * xhat)
        if beta.requires_grad:
            gb = _channel_sum(g)
        if x.requires_grad:
            k = (gamma.data * invstd).reshape(bshape)
            if training:
                s1 = (_channel_sum(g) / dt(M)).reshape(bshape)
                s2 = (_channel_sum(g * xhat) / dt(M)).reshape(bshape)
                gx = k * (g - s1 - xhat * s2)
            else:
                gx = g * k
        return gx, gg, gb

    return record(y, (x, gamma, beta), fn)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, x.dtype.type(0))
    return record(y, (x,), lambda g: (g * (y > 0),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    half = xd.dtype.type(0.5)
    y = half * (np.tanh(half * xd) + xd.dtype.type(1))
    return record(y, (x,), lambda g: (g * y * (1 - y),))


def softmax(x: Tensor) -> Tensor:
    """Softmax along the final axis."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"relu": relu, "sigmoid": sigmoid, "softmax": softmax}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def _integer_factor(factor) -> int:
    if isinstance(factor, Integral):
        f = int(factor)
    elif isinstance(factor, Real) and float(factor).is_integer():
        f = int(factor)
    else:
        raise ValueError(f"only integer scale factors are supported, got {factor!r}")
    if f < 1:
        raise ValueError(f"scale factor must be >= 1, got {f}")
    return f


def upsample_nearest(x: Tensor, factor) -> Tensor:
    """Replicate each pixel into a ``factor`` x ``factor`` block."""
    f = _integer_factor(factor)
    if f == 1:
        return record(x.data.copy(), (x,), lambda g: (g,))
    N, C, H, W = x.shape
    y = np.broadcast_to(x.data[:, :, :, None, :, None], (N, C, H, f, W, f)).reshape(N, C, H * f, W * f)
    return record(y, (x,), lambda g: (g.reshape(N, C, H, f, W, f).sum(axis=(3, 5)),))


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping ``size`` x ``size`` average pooling."""
    k = _integer_factor(size)
    N, C, H, W = x.shape
    if H % k or W % k:
        raise ValueError(f"spatial size {H}x{W} is not divisible by pool size {k}")
    y = x.data.reshape(N, C, H // k, k, W // k, k).mean(axis=(3, 5))
    inv = x.dtype.type(1.0 / (k * k))

    def fn(g):
        return (np.broadcast_to((g * inv)[:, :, :, None, :, None], (N, C, H // k, k, W // k, k)).reshape(N, C, H, W),)

    return record(y, (x,), fn)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects (N,C,H,W), got {x.shape}")
    return mean(x, axis=(2, 3))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in_features, out_features)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    xd, wd = x.data, weight.data
    y = xd @ wd
    if bias is not None:
        y = y + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return record(y, inputs, fn)


def _check_labels(labels) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {lab.shape}")
    if not np.all((lab == 0) | (lab == 1)):
        bad = lab[(lab != 0) & (lab != 1)]
        raise ValueError(f"labels must be 0 (spoof) or 1 (genuine); got {bad[:5].tolist()}")
    return lab.astype(np.int64)


def bce_loss(probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class for (N, 2) probabilities.

    Probabilities are clamped at :data:`BCE_FLOOR` before the logarithm.
    """
    lab = _check_labels(labels)
    if probs.ndim != 2 or probs.shape[1] != 2 or probs.shape[0] != lab.shape[0]:
        raise ValueError(f"bce_loss expects probs (N,2) matching labels; got {probs.shape} and {lab.shape}")
    N = lab.shape[0]
    rows = np.arange(N)
    picked = probs.data[rows, lab]
    clamped = np.maximum(picked, probs.dtype.type(BCE_FLOOR))
    loss = -np.log(clamped).mean()

    def fn(g):
        gp = np.zeros_like(probs.data)
        live = picked > BCE_FLOOR
        gp[rows, lab] = np.where(live, -g / (N * clamped), 0)
        return (gp,)

    return record(np.asarray(loss, dtype=probs.dtype), (probs,), fn)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared elementwise error; ``target`` may be a constant array or tensor."""
    target = as_tensor(target) if not isinstance(target, Tensor) else target
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data.astype(pred.dtype, copy=False)
    n = diff.size
    loss = np.asarray((diff * diff).mean(), dtype=pred.dtype)
    k = pred.dtype.type(2.0 / n)
    return record(loss, (pred, target), lambda g: (g * k * diff, -g * k * diff))
