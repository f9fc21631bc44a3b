"""numba-compiled hot kernels; same contracts as numpy_kernels.

Parallelism is over the batch axis only: every thread owns disjoint output
slices, so results are bit-reproducible for a fixed input regardless of
thread scheduling.
"""

import os

# Avoid probing the (too old) TBB runtime; omp is always available here.
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

import numpy as np
from numba import njit, prange

NAME = "numba"

_JIT = dict(parallel=True, cache=True, nogil=True)


@njit(**_JIT)
def im2col(padded, kh, kw, stride, ho, wo):
    n, c, hp, wp = padded.shape
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=padded.dtype)
    for ni in prange(n):
        for oh in range(ho):
            ih0 = oh * stride
            for ow in range(wo):
                iw0 = ow * stride
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            cols[ni, oh, ow, ci, i, j] = padded[ni, ci, ih0 + i, iw0 + j]
    return cols


@njit(**_JIT)
def col2im_add(dcols, stride, hp, wp):
    n, ho, wo, c, kh, kw = dcols.shape
    out = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for ni in prange(n):
        for oh in range(ho):
            ih0 = oh * stride
            for ow in range(wo):
                iw0 = ow * stride
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            out[ni, ci, ih0 + i, iw0 + j] += dcols[ni, oh, ow, ci, i, j]
    return out


@njit(**_JIT)
def corr_forward(a, b, offs_y, offs_x):
    n, c, h, w = a.shape
    d = offs_y.shape[0]
    out = np.zeros((n, d, h, w), dtype=a.dtype)
    inv_c = 1.0 / c
    for ni in prange(n):
        for k in range(d):
            dy, dx = offs_y[k], offs_x[k]
            for y in range(max(0, -dy), min(h, h - dy)):
                for x in range(max(0, -dx), min(w, w - dx)):
                    acc = 0.0
                    for ci in range(c):
                        acc += a[ni, ci, y, x] * b[ni, ci, y + dy, x + dx]
                    out[ni, k, y, x] = acc * inv_c
    return out


@njit(**_JIT)
def corr_backward(a, b, gout, offs_y, offs_x):
    n, c, h, w = a.shape
    d = offs_y.shape[0]
    da = np.zeros_like(a)
    db = np.zeros_like(b)
    inv_c = 1.0 / c
    for ni in prange(n):
        for k in range(d):
            dy, dx = offs_y[k], offs_x[k]
            for y in range(max(0, -dy), min(h, h - dy)):
                for x in range(max(0, -dx), min(w, w - dx)):
                    g = gout[ni, k, y, x] * inv_c
                    for ci in range(c):
                        da[ni, ci, y, x] += g * b[ni, ci, y + dy, x + dx]
                        db[ni, ci, y + dy, x + dx] += g * a[ni, ci, y, x]
    return da, db
