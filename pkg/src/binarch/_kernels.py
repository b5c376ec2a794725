"""Direct-loop grouped convolution kernels (numba).

Used for grouped convs, where im2col spends its time copying columns for tiny
matmuls. Arrays are laid out [C, H, W, N] so the innermost loop runs over the
contiguous batch axis regardless of stride and dilation. Summation order is
fixed, so results are deterministic.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _forward(xp, w, out, stride, dil, groups):
    n_out, cg, kh, kw = w.shape
    og = n_out // groups
    ho, wo, nb = out.shape[1], out.shape[2], out.shape[3]
    for o in range(n_out):
        g = o // og
        for c in range(cg):
            ci = g * cg + c
            for i in range(kh):
                for j in range(kw):
                    wv = w[o, c, i, j]
                    for y in range(ho):
                        for x in range(wo):
                            src = xp[ci, y * stride + i * dil, x * stride + j * dil]
                            dst = out[o, y, x]
                            for n in range(nb):
                                dst[n] += wv * src[n]


@numba.njit(cache=True)
def _grad_input(gout, w, dxp, stride, dil, groups):
    n_out, cg, kh, kw = w.shape
    og = n_out // groups
    ho, wo, nb = gout.shape[1], gout.shape[2], gout.shape[3]
    for o in range(n_out):
        g = o // og
        for c in range(cg):
            ci = g * cg + c
            for i in range(kh):
                for j in range(kw):
                    wv = w[o, c, i, j]
                    for y in range(ho):
                        for x in range(wo):
                            dst = dxp[ci, y * stride + i * dil, x * stride + j * dil]
                            src = gout[o, y, x]
                            for n in range(nb):
                                dst[n] += wv * src[n]


@numba.njit(cache=True)
def _grad_weight(gout, xp, dw, stride, dil, groups):
    n_out, cg, kh, kw = dw.shape
    og = n_out // groups
    ho, wo, nb = gout.shape[1], gout.shape[2], gout.shape[3]
    acc = np.zeros(nb, dtype=dw.dtype)
    for o in range(n_out):
        g = o // og
        for c in range(cg):
            ci = g * cg + c
            for i in range(kh):
                for j in range(kw):
                    acc[:] = 0
                    for y in range(ho):
                        for x in range(wo):
                            a = gout[o, y, x]
                            b = xp[ci, y * stride + i * dil, x * stride + j * dil]
                            for n in range(nb):
                                acc[n] += a[n] * b[n]
                    s = 0.0
                    for n in range(nb):
                        s += acc[n]
                    dw[o, c, i, j] = s


def _chwn(x: np.ndarray, padding: int, dtype) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((c, h + 2 * padding, w + 2 * padding, n), dtype=dtype)
    out[:, padding:padding + h, padding:padding + w, :] = x.transpose(1, 2, 3, 0)
    return out


def conv_forward(x, w, stride, padding, dilation, groups, ho, wo):
    dtype = np.result_type(x.dtype, w.dtype)
    out = np.zeros((w.shape[0], ho, wo, x.shape[0]), dtype=dtype)
    _forward(_chwn(x, padding, dtype), np.ascontiguousarray(w, dtype=dtype), out, stride, dilation, groups)
    return np.ascontiguousarray(out.transpose(3, 0, 1, 2))


def conv_grad_input(g, w, x_shape, stride, padding, dilation, groups):
    n, c, h, wd = x_shape
    dtype = np.result_type(g.dtype, w.dtype)
    dxp = np.zeros((c, h + 2 * padding, wd + 2 * padding, n), dtype=dtype)
    _grad_input(_chwn(g, 0, dtype), np.ascontiguousarray(w, dtype=dtype), dxp, stride, dilation, groups)
    return np.ascontiguousarray(dxp[:, padding:padding + h, padding:padding + wd, :].transpose(3, 0, 1, 2))


def conv_grad_weight(g, x, w_shape, stride, padding, dilation, groups):
    dtype = np.result_type(g.dtype, x.dtype)
    dw = np.zeros(tuple(w_shape), dtype=dtype)
    _grad_weight(_chwn(g, 0, dtype), _chwn(x, padding, dtype), dw, stride, dilation, groups)
    return dw
