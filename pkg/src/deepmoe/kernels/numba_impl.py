"""Numba-compiled versions of the convolution data-movement kernels.

Loops are kept serial so that accumulation order is fixed and repeated runs
are bitwise identical. Signatures mirror ``numpy_impl`` exactly.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(xp, k, stride, h_out, w_out):
    b, c, _, _ = xp.shape
    cols = np.empty((b, c * k * k, h_out * w_out), dtype=xp.dtype)
    for bi in range(b):
        for ci in range(c):
            for u in range(k):
                for v in range(k):
                    row = (ci * k + u) * k + v
                    for i in range(h_out):
                        src_i = i * stride + u
                        base = i * w_out
                        for j in range(w_out):
                            cols[bi, row, base + j] = xp[bi, ci, src_i, j * stride + v]
    return cols


@njit(cache=True)
def col2im(cols, c, k, stride, hp, wp, h_out, w_out):
    b = cols.shape[0]
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for bi in range(b):
        for ci in range(c):
            for u in range(k):
                for v in range(k):
                    row = (ci * k + u) * k + v
                    for i in range(h_out):
                        dst_i = i * stride + u
                        base = i * w_out
                        for j in range(w_out):
                            xp[bi, ci, dst_i, j * stride + v] += cols[bi, row, base + j]
    return xp
