"""Differentiable network operations on ``Tensor``.

Convolution is cross-correlation (no kernel flip). All spatial ops take NCHW
input.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import _kernels
from .tensor import Tensor


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def check_conv_shapes(x_shape, w_shape, groups: int) -> None:
    if len(x_shape) != 4:
        raise ValueError(f"conv input must be NCHW, got shape {tuple(x_shape)}")
    if len(w_shape) != 4:
        raise ValueError(f"conv weight must be [O, C/g, kh, kw], got shape {tuple(w_shape)}")
    if groups < 1:
        raise ValueError(f"groups must be positive, got {groups}")
    c, o = x_shape[1], w_shape[0]
    if c % groups:
        raise ValueError(f"input channels {c} not divisible by groups {groups}")
    if o % groups:
        raise ValueError(f"output channels {o} not divisible by groups {groups}")
    if w_shape[1] != c // groups:
        raise ValueError(f"weight expects {w_shape[1]} channels per group, input gives {c // groups}")
    if w_shape[2] % 2 == 0 or w_shape[3] % 2 == 0:
        raise ValueError(f"kernel sizes must be odd, got {w_shape[2]}x{w_shape[3]}")


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Strided view [N, C, kh, kw, Ho, Wo] over a padded input."""
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
        writeable=False,
    )


def im2col(x: np.ndarray, kh: int, kw: int, groups: int, stride: int, padding: int, dilation: int):
    """Unfold ``x`` into per-group columns [g, Cg*kh*kw, N*Ho*Wo]."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for kernel {kh}x{kw} with dilation {dilation}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(np.ascontiguousarray(xp), kh, kw, stride, dilation, ho, wo)
    cg = c // groups
    cols = win.reshape(n, groups, cg, kh, kw, ho, wo).transpose(1, 2, 3, 4, 0, 5, 6)
    return cols.reshape(groups, cg * kh * kw, n * ho * wo), ho, wo


def col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, groups: int, stride: int, padding: int,
           dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    cg = c // groups
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    d = dcols.reshape(groups, cg, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            patch = d[:, :, i, j].transpose(2, 0, 1, 3, 4).reshape(n, c, ho, wo)
            r0, c0 = i * dilation, j * dilation
            dxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += patch
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + w]
    return dxp


# "auto" uses the direct kernels for grouped convs, im2col + matmul otherwise
_CONV_BACKEND = "auto"


def set_conv_backend(name: str) -> None:
    global _CONV_BACKEND
    if name not in ("auto", "im2col", "direct"):
        raise ValueError(f"unknown conv backend {name!r}")
    _CONV_BACKEND = name


def _use_direct(groups: int) -> bool:
    return _CONV_BACKEND == "direct" or (_CONV_BACKEND == "auto" and groups > 1)


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int, dilation: int,
                 groups: int) -> np.ndarray:
    check_conv_shapes(x.shape, w.shape, groups)
    o, cg, kh, kw = w.shape
    n = x.shape[0]
    if _use_direct(groups):
        ho = conv_output_size(x.shape[2], kh, stride, padding, dilation)
        wo = conv_output_size(x.shape[3], kw, stride, padding, dilation)
        if ho < 1 or wo < 1:
            raise ValueError(f"input {x.shape[2]}x{x.shape[3]} too small for kernel {kh}x{kw} "
                             f"with dilation {dilation}")
        return _kernels.conv_forward(x, w, stride, padding, dilation, groups, ho, wo)
    og = o // groups
    cols, ho, wo = im2col(x, kh, kw, groups, stride, padding, dilation)
    out = np.matmul(w.reshape(groups, og, cg * kh * kw), cols)
    return np.ascontiguousarray(out.reshape(groups, og, n, ho, wo).transpose(2, 0, 1, 3, 4)).reshape(n, o, ho, wo)


def conv_grad_input(g: np.ndarray, w: np.ndarray, x_shape, stride: int, padding: int, dilation: int,
                    groups: int) -> np.ndarray:
    o, cg, kh, kw = w.shape
    n, c, h, wd = x_shape
    ho, wo = g.shape[2], g.shape[3]
    if _use_direct(groups):
        return _kernels.conv_grad_input(g, w, x_shape, stride, padding, dilation, groups)
    og = o // groups
    gm = g.reshape(n, groups, og, ho * wo).transpose(1, 2, 0, 3).reshape(groups, og, n * ho * wo)
    dcols = np.matmul(w.reshape(groups, og, cg * kh * kw).transpose(0, 2, 1), gm)
    return col2im(dcols, x_shape, kh, kw, groups, stride, padding, dilation, ho, wo)


def conv_grad_weight(g: np.ndarray, x: np.ndarray, w_shape, stride: int, padding: int, dilation: int,
                     groups: int) -> np.ndarray:
    o, cg, kh, kw = w_shape
    n = x.shape[0]
    ho, wo = g.shape[2], g.shape[3]
    if _use_direct(groups):
        return _kernels.conv_grad_weight(g, x, w_shape, stride, padding, dilation, groups)
    og = o // groups
    gm = g.reshape(n, groups, og, ho * wo).transpose(1, 2, 0, 3).reshape(groups, og, n * ho * wo)
    cols, _, _ = im2col(x, kh, kw, groups, stride, padding, dilation)
    return np.matmul(gm, cols.transpose(0, 2, 1)).reshape(w_shape)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0,
           dilation: int = 1, groups: int = 1) -> Tensor:
    """Grouped, dilated 2-D cross-correlation of NCHW ``x`` with [O, C/g, kh, kw] ``weight``."""
    out = conv_forward(x.data, weight.data, stride, padding, dilation, groups)
    o = weight.shape[0]
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    x_shape = x.shape

    def bw(g):
        gw = gx = None
        if weight.requires_grad:
            gw = conv_grad_weight(g, x.data, weight.shape, stride, padding, dilation, groups)
        if x.requires_grad:
            gx = conv_grad_input(g, weight.data, x_shape, stride, padding, dilation, groups)
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, bw)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, padding)
    wo = conv_output_size(w, kernel, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = _windows(xp, kernel, kernel, stride, 1, ho, wo)
    flat = win.reshape(n, c, kernel * kernel, ho, wo)
    arg = flat.argmax(axis=2)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

    def bw(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for k in range(kernel * kernel):
            i, j = divmod(k, kernel)
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * (arg == k)
        return (dxp[:, :, padding:padding + h, padding:padding + w],)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), bw)


def avg_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling; padded positions are excluded from the divisor."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, padding)
    wo = conv_output_size(w, kernel, stride, padding)
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad)
    ones = np.pad(np.ones((1, 1, h, w), dtype=x.dtype), pad)
    count = _windows(ones, kernel, kernel, stride, 1, ho, wo).sum(axis=(2, 3))
    out = _windows(xp, kernel, kernel, stride, 1, ho, wo).sum(axis=(2, 3)) / count

    def bw(g):
        gs = g / count
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gs
        return (dxp[:, :, padding:padding + h, padding:padding + w],)

    return Tensor._from_op(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    hw = h * w

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)

    return Tensor._from_op(x.data.mean(axis=(2, 3)), (x,), bw)


def batch_norm(x: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor], running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over N, H, W.

    In training mode the running buffers are updated in place with the
    unbiased batch variance.
    """
    if x.shape[0] == 0:
        raise ValueError("batch_norm got an empty batch")
    c = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.size // c
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * m / max(m - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape) if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + beta.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma is not None else None
        gb = g.sum(axis=axes) if beta is not None else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd if gd is not None else g
            if training:
                gx = (dxhat - dxhat.mean(axis=axes, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)) * inv.reshape(bshape)
            else:
                gx = dxhat * inv.reshape(bshape)
        grads = [gx]
        if gamma is not None:
            grads.append(gg)
        if beta is not None:
            grads.append(gb)
        return tuple(grads)

    parents = [x] + [p for p in (gamma, beta) if p is not None]
    return Tensor._from_op(out.astype(x.dtype, copy=False), tuple(parents), bw)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one slope per channel (axis 1) or a single scalar slope."""
    s = slope.data
    if s.size not in (1, x.shape[1]):
        raise ValueError(f"prelu slope of size {s.size} does not match {x.shape[1]} channels")
    bshape = (1, -1) + (1,) * (x.ndim - 2) if s.size > 1 else (1,) * x.ndim
    sb = s.reshape(bshape)
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * sb)

    def bw(g):
        gx = np.where(pos, g, g * sb)
        gs = np.where(pos, 0.0, g * x.data)
        gs = gs.sum(axis=tuple(i for i in range(x.ndim) if i != 1)) if s.size > 1 else np.array([gs.sum()])
        return gx, gs.reshape(s.shape).astype(s.dtype, copy=False)

    return Tensor._from_op(out, (x, slope), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias.data

    def bw(g):
        grads = (g @ weight.data, g.T @ x.data)
        if bias is not None:
            grads = grads + (g.sum(axis=0),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, bw)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean cross-entropy of [N, K] logits against integer labels or soft [N, K] targets."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be [N, K], got {logits.shape}")
    n, k = logits.shape
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.ndim == 1:
        if t.shape[0] != n:
            raise ValueError(f"{t.shape[0]} labels for {n} logits")
        if t.size and (t.min() < 0 or t.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        soft = np.zeros((n, k), dtype=logits.dtype)
        soft[np.arange(n), t.astype(np.int64)] = 1.0
    elif t.shape == (n, k):
        soft = t.astype(logits.dtype, copy=False)
    else:
        raise ValueError(f"target shape {t.shape} does not match logits {logits.shape}")
    logp = log_softmax_np(logits.data)
    loss = -(soft * logp).sum() / n

    def bw(g):
        return (g * (np.exp(logp) - soft) / n,)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def scale_channels(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply NCHW ``x`` by a per-channel vector."""
    if scale.shape != (x.shape[1],):
        raise ValueError(f"scale shape {scale.shape} does not match {x.shape[1]} channels")
    return x * scale.reshape(1, -1, 1, 1)


def abs_(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)

    def bw(g):
        return (g * sgn,)

    return Tensor._from_op(np.abs(x.data), (x,), bw)


def pad_zero_like(x: Tensor, stride: int) -> Tensor:
    """Zeros shaped like ``x`` after a stride-``stride`` spatial reduction."""
    n, c, h, w = x.shape
    return Tensor(np.zeros((n, c, (h + stride - 1) // stride, (w + stride - 1) // stride), dtype=x.dtype))


__all__ = [
    "conv2d", "max_pool2d", "avg_pool2d", "global_avg_pool", "batch_norm", "prelu", "linear",
    "softmax_cross_entropy", "scale_channels", "abs_", "conv_output_size", "im2col", "col2im",
    "check_conv_shapes", "pad_zero_like",
]
