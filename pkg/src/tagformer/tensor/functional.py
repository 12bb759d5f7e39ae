"""Neural-network primitives with hand-written backward passes.

Convolution and pooling work on NCHW arrays. Convolution is
cross-correlation (no kernel flip) implemented with an im2col buffer.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import ShapeError
from .core import Tensor, _wrap, add, matmul

BCE_CLAMP = 1e-7


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x.data * pdf),)

    return Tensor._make(out.astype(x.dtype, copy=False), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    return Tensor._make(out, (x,), lambda g: (g * out * (1 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine transform."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gbeta = g.sum(axis=lead)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv / n * (n * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,))


def embedding_lookup(table: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    out = table.data[index]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(out, (table,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# -- convolution ---------------------------------------------------------


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d kernel {(kh, kw)} larger than padded input {(Hp, Wp)}")
    Ho, Wo = (Hp - kh) // sh + 1, (Wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::sh, ::sw][:, :, :Ho, :Wo].reshape(B, C, Ho * Wo)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, Ho * Wo)
    wmat = weight.data.reshape(O, C * kh * kw)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(B, O, Ho, Wo)

    def backward(g):
        g2 = g.reshape(B, O, Ho * Wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(B, C, kh, kw, Ho, Wo)
            gxp = np.zeros((B, C, Hp, Wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += gcols[:, :, i, j]
            gx = gxp[:, :, ph : ph + H, pw : pw + W]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def maxpool2d(x: Tensor, kernel, stride=None) -> Tensor:
    """Max pooling; gradient goes to the first maximal element of each window."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    B, C, H, W = x.shape
    if kh > H or kw > W:
        raise ShapeError(f"maxpool2d kernel {(kh, kw)} larger than input {(H, W)}")
    Ho, Wo = (H - kh) // sh + 1, (W - kw) // sw + 1
    if (sh, sw) == (kh, kw):
        win = x.data[:, :, : Ho * kh, : Wo * kw].reshape(B, C, Ho, kh, Wo, kw).transpose(0, 1, 2, 4, 3, 5)
    else:
        win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        di, dj = np.divmod(arg, kw)
        rows = np.arange(Ho)[None, None, :, None] * sh + di
        cols = np.arange(Wo)[None, None, None, :] * sw + dj
        bi = np.arange(B)[:, None, None, None]
        ci = np.arange(C)[None, :, None, None]
        gx = np.zeros_like(x.data)
        if (sh, sw) == (kh, kw):
            gx[bi, ci, rows, cols] = g
        else:
            np.add.at(gx, (bi, ci, rows, cols), g)
        return (gx,)

    return Tensor._make(out, (x,), backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    In training mode the running statistics are updated in place
    (unbiased variance, exponential average with ``momentum``).
    """
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            gbeta = g.sum(axis=axes)
        if x.requires_grad:
            gh = g * gamma.data.reshape(shape)
            if training:
                m = x.data.size // x.shape[1]
                gx = (inv.reshape(shape) / m) * (
                    m * gh - gh.sum(axis=axes, keepdims=True) - xhat * (gh * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gh * inv.reshape(shape)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward)


# -- losses --------------------------------------------------------------


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross entropy; targets may be soft labels in [0, 1]."""
    target = _wrap(target, pred.data)
    if pred.shape != target.shape:
        raise ShapeError(f"bce_loss shape mismatch: pred {pred.shape}, target {target.shape}")
    p = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = target.data
    n = p.size
    loss = -(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()

    def backward(g):
        gp = g * (p - t) / (p * (1 - p)) / n
        return gp.astype(pred.dtype, copy=False), None

    return Tensor._make(np.asarray(loss, dtype=pred.dtype), (pred, target), backward)


def amax(x: Tensor, axis: int = -1) -> Tensor:
    """Max along one axis; gradient goes to the first maximal element."""
    arg = x.data.argmax(axis=axis)
    idx = np.expand_dims(arg, axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return Tensor._make(out, (x,), backward)
