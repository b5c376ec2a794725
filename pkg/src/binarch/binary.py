"""Sign binarization, bit-packing and XNOR/popcount convolution.

A binary convolution computes ``conv(sign(x), sign(w)) * alpha`` where alpha is
a learnable positive per-output-channel scale. The packed kernel evaluates the
±1 dot products as ``n_valid - 2 * popcount((a ^ b) & valid)``; zero-padding
positions are cleared from the valid mask so they contribute 0, exactly like
the float convolution on pre-signed operands.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import functional as F
from .nn import Module, Parameter
from .tensor import Tensor

WORD_BITS = 64


def sign(values: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = +1."""
    return np.where(values >= 0, 1.0, -1.0).astype(values.dtype if np.issubdtype(values.dtype, np.floating)
                                                    else np.float64)


def _pack_rows(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean [..., n] array into little-endian uint64 words [..., ceil(n/64)]."""
    n = bits.shape[-1]
    nwords = max(1, -(-n // WORD_BITS))
    packed = np.packbits(bits, axis=-1, bitorder="little")
    extra = nwords * 8 - packed.shape[-1]
    if extra:
        packed = np.concatenate([packed, np.zeros(packed.shape[:-1] + (extra,), np.uint8)], axis=-1)
    return np.ascontiguousarray(packed).view("<u8")


@dataclass(frozen=True)
class BitPlanes:
    """Sign bits of a tensor packed along its trailing axis, one bit per element.

    Bit ``k`` of a row is 1 iff element ``k`` is >= 0. ``valid`` holds the
    number of meaningful bits per row; trailing pad bits are zero and masked
    out of every popcount.
    """

    logical_shape: tuple[int, ...]
    words: np.ndarray
    valid: int

    @property
    def rows(self) -> int:
        return self.words.shape[0]

    def mask(self) -> np.ndarray:
        return _pack_rows(np.ones((1, self.valid), dtype=bool))[0]

    def unpack(self) -> np.ndarray:
        """Return the ±1 float array this plane encodes."""
        as_bytes = np.ascontiguousarray(self.words).view(np.uint8)
        bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")[:, :self.valid]
        return np.where(bits == 1, 1.0, -1.0).reshape(self.logical_shape)


def pack_signs(t) -> BitPlanes:
    data = np.asarray(t.data if isinstance(t, Tensor) else t)
    shape = data.shape
    n = shape[-1] if data.ndim else 1
    rows = data.reshape(-1, n) if data.size else data.reshape(0, n)
    return BitPlanes(tuple(shape), _pack_rows(rows >= 0), n)


def popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


def binary_dot(a: BitPlanes, b: BitPlanes, n: Optional[int] = None) -> int:
    """±1 dot product of two single-row planes of equal logical length."""
    n = a.valid if n is None else n
    if a.valid != b.valid or a.valid != n:
        raise ValueError(f"binary_dot length mismatch: {a.valid}, {b.valid}, n={n}")
    if a.rows != 1 or b.rows != 1:
        raise ValueError("binary_dot expects single-row planes")
    diff = (a.words[0] ^ b.words[0]) & a.mask()
    return int(n - 2 * int(popcount(diff).sum()))


def packed_conv_counts(x_signs: np.ndarray, w_signs: np.ndarray, stride: int, padding: int, dilation: int,
                       groups: int, chunk: int = 4096) -> np.ndarray:
    """Integer ±1 convolution via XNOR/popcount on packed receptive fields."""
    F.check_conv_shapes(x_signs.shape, w_signs.shape, groups)
    o, cg, kh, kw = w_signs.shape
    n = x_signs.shape[0]
    og = o // groups
    # padding yields exact zeros; every real entry is ±1
    cols, ho, wo = F.im2col(x_signs, kh, kw, groups, stride, padding, dilation)
    cols = cols.transpose(0, 2, 1)
    xbits = _pack_rows(cols > 0)
    xmask = _pack_rows(cols != 0)
    wbits = _pack_rows(w_signs.reshape(groups, og, cg * kh * kw) > 0)
    nvalid = popcount(xmask).sum(axis=-1, dtype=np.int64)
    m = cols.shape[1]
    out = np.empty((groups, og, m), dtype=np.int64)
    for start in range(0, m, chunk):
        sl = slice(start, start + chunk)
        diff = (wbits[:, :, None, :] ^ xbits[:, None, sl, :]) & xmask[:, None, sl, :]
        mism = popcount(diff).sum(axis=-1, dtype=np.int64)
        out[:, :, sl] = nvalid[:, None, sl] - 2 * mism
    return out.reshape(groups, og, n, ho, wo).transpose(2, 0, 1, 3, 4).reshape(n, o, ho, wo)


def sign_ste_backward(saved_input: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Clipped straight-through gradient: pass ``upstream`` where |x| <= 1."""
    if saved_input.shape != upstream.shape:
        raise ValueError(f"shape mismatch {saved_input.shape} vs {upstream.shape}")
    return upstream * (np.abs(saved_input) <= 1.0)


def sign_ste(x: Tensor) -> Tensor:
    """Forward sign(x) in {-1, +1}; backward is the clipped straight-through rule."""
    saved = x.data

    def bw(g):
        return (sign_ste_backward(saved, g),)

    return Tensor._from_op(sign(saved), (x,), bw)


class ScaleFactor(Module):
    """Learnable positive per-output-channel scale, stored raw and used as |raw|."""

    def __init__(self, channels: int, init=1.0) -> None:
        self.raw = Parameter(np.broadcast_to(np.asarray(init, dtype=float), (channels,)).copy())

    def value(self) -> Tensor:
        return F.abs_(self.raw)

    def effective(self) -> np.ndarray:
        return np.abs(self.raw.data)


def binary_conv2d(x: Tensor, weight: Tensor, alpha: ScaleFactor, groups: int = 1, dilation: int = 1,
                  stride: int = 1, padding: int = 0, packed: bool = True) -> Tensor:
    """``conv(sign(x), sign(weight)) * |alpha|`` with STE gradients to x and weight.

    ``packed=False`` evaluates the same integers with a float convolution; both
    paths share the backward rule.
    """
    F.check_conv_shapes(x.shape, weight.shape, groups)
    xs = sign(x.data)
    ws = sign(weight.data)
    if packed:
        counts = packed_conv_counts(xs, ws, stride, padding, dilation, groups).astype(x.dtype)
    else:
        counts = F.conv_forward(xs, ws, stride, padding, dilation, groups)
    a = alpha.effective().astype(x.dtype)
    raw = alpha.raw
    out = counts * a.reshape(1, -1, 1, 1)
    x_shape = x.shape

    def bw(g):
        ga = (g * counts).sum(axis=(0, 2, 3)) * np.sign(raw.data)
        gs = g * a.reshape(1, -1, 1, 1)
        gx = gw = None
        if x.requires_grad:
            dxs = F.conv_grad_input(gs, ws, x_shape, stride, padding, dilation, groups)
            gx = sign_ste_backward(x.data, dxs)
        if weight.requires_grad:
            dws = F.conv_grad_weight(gs, xs, weight.shape, stride, padding, dilation, groups)
            gw = sign_ste_backward(weight.data, dws)
        return gx, gw, ga.astype(raw.dtype, copy=False)

    return Tensor._from_op(out, (x, weight, raw), bw)


def quant_conv2d(x: Tensor, weight: Tensor, alpha: ScaleFactor, *, binary_weights: bool, binary_acts: bool,
                 groups: int = 1, dilation: int = 1, stride: int = 1, padding: int = 0,
                 packed: bool = False) -> Tensor:
    """Convolution with each operand independently kept real or binarized, scaled by |alpha|."""
    if binary_weights and binary_acts:
        return binary_conv2d(x, weight, alpha, groups, dilation, stride, padding, packed=packed)
    xin = sign_ste(x) if binary_acts else x
    win = sign_ste(weight) if binary_weights else weight
    y = F.conv2d(xin, win, None, stride, padding, dilation, groups)
    return F.scale_channels(y, alpha.value())
