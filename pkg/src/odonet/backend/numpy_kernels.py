"""Pure-numpy implementations of the hot gather/scatter kernels.

These are the fallback path (select with ODONET_BACKEND=numpy). The numba
module implements the same four functions with identical signatures and
semantics; both feed the BLAS matmuls that do the heavy lifting in conv2d.
"""

import numpy as np

NAME = "numpy"


def im2col(padded, kh, kw, stride, ho, wo):
    """[N,C,HP,WP] padded input -> [N,HO,WO,C,kh,kw] patch matrix."""
    n, c, _, _ = padded.shape
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=padded.dtype)
    for i in range(kh):
        for j in range(kw):
            src = padded[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[:, :, :, :, i, j] = src.transpose(0, 2, 3, 1)
    return cols


def col2im_add(dcols, stride, hp, wp):
    """Adjoint of im2col: scatter-add [N,HO,WO,C,kh,kw] back to [N,C,HP,WP]."""
    n, ho, wo, c, kh, kw = dcols.shape
    out = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            # Strided slices for a fixed (i, j) never overlap, so += is exact.
            dst = out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            dst += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def corr_forward(a, b, offs_y, offs_x):
    """Per-pixel normalized dot products between a and displaced b.

    a, b: [N,C,H,W]; offs: D displacement offsets. Output [N,D,H,W] where
    channel d holds sum_c a[c,h,w] * b[c,h+dy,w+dx] / C, zero when the
    displaced position falls outside the image.
    """
    n, c, h, w = a.shape
    d = offs_y.shape[0]
    out = np.zeros((n, d, h, w), dtype=a.dtype)
    inv_c = np.asarray(1.0 / c, dtype=a.dtype)
    for k in range(d):
        dy, dx = int(offs_y[k]), int(offs_x[k])
        y0, y1 = max(0, -dy), min(h, h - dy)
        x0, x1 = max(0, -dx), min(w, w - dx)
        if y0 >= y1 or x0 >= x1:
            continue
        prod = a[:, :, y0:y1, x0:x1] * b[:, :, y0 + dy : y1 + dy, x0 + dx : x1 + dx]
        out[:, k, y0:y1, x0:x1] = prod.sum(axis=1) * inv_c
    return out


def corr_backward(a, b, gout, offs_y, offs_x):
    """Gradients of corr_forward w.r.t. both feature maps."""
    n, c, h, w = a.shape
    d = offs_y.shape[0]
    da = np.zeros_like(a)
    db = np.zeros_like(b)
    inv_c = np.asarray(1.0 / c, dtype=a.dtype)
    for k in range(d):
        dy, dx = int(offs_y[k]), int(offs_x[k])
        y0, y1 = max(0, -dy), min(h, h - dy)
        x0, x1 = max(0, -dx), min(w, w - dx)
        if y0 >= y1 or x0 >= x1:
            continue
        g = gout[:, k : k + 1, y0:y1, x0:x1] * inv_c
        da[:, :, y0:y1, x0:x1] += g * b[:, :, y0 + dy : y1 + dy, x0 + dx : x1 + dx]
        db[:, :, y0 + dy : y1 + dy, x0 + dx : x1 + dx] += g * a[:, :, y0:y1, x0:x1]
    return da, db
