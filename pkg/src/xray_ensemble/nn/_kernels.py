"""Compiled inner loops for the memory-bound layer ops.

Each kernel has the same semantics as a short numpy expression; they exist
because strided numpy passes over 150x150x32 feature maps dominate training
time.
"""
from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def pool_forward(x, window):
    b, h, w, c = x.shape
    ho, wo = h // window, w // window
    out = np.empty((b, ho, wo, c), x.dtype)
    arg = np.zeros((b, ho, wo, c), np.int8)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    out[n, i, j, ch] = x[n, i * window, j * window, ch]
                for k in range(1, window * window):
                    di = k // window
                    dj = k % window
                    for ch in range(c):
                        v = x[n, i * window + di, j * window + dj, ch]
                        # strict > keeps the first maximum in row-major order
                        if v > out[n, i, j, ch]:
                            out[n, i, j, ch] = v
                            arg[n, i, j, ch] = k
    return out, arg


@numba.njit(cache=True)
def pool_backward(grad, arg, h, w, window):
    b, ho, wo, c = grad.shape
    out = np.zeros((b, h, w, c), grad.dtype)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    k = arg[n, i, j, ch]
                    out[n, i * window + k // window, j * window + k % window, ch] = grad[n, i, j, ch]
    return out


@numba.njit(cache=True)
def im2col(x, kh, kw, pt, pl, ho, wo):
    """Rows of receptive fields ordered (kh, kw, cin); out-of-range taps are 0."""
    b, h, w, c = x.shape
    cols = np.empty((b, ho, wo, kh, kw, c), x.dtype)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                for di in range(kh):
                    r = i + di - pt
                    for dj in range(kw):
                        q = j + dj - pl
                        if 0 <= r < h and 0 <= q < w:
                            for ch in range(c):
                                cols[n, i, j, di, dj, ch] = x[n, r, q, ch]
                        else:
                            for ch in range(c):
                                cols[n, i, j, di, dj, ch] = 0.0
    return cols.reshape(b * ho * wo, kh * kw * c)


@numba.njit(cache=True)
def col2im(dcols, b, h, w, c, kh, kw, pt, pl, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add receptive-field rows back."""
    d = dcols.reshape(b, ho, wo, kh, kw, c)
    out = np.zeros((b, h, w, c), dcols.dtype)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                for di in range(kh):
                    r = i + di - pt
                    if r < 0 or r >= h:
                        continue
                    for dj in range(kw):
                        q = j + dj - pl
                        if q < 0 or q >= w:
                            continue
                        for ch in range(c):
                            out[n, r, q, ch] += d[n, i, j, di, dj, ch]
    return out
