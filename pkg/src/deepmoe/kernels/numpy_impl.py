"""Pure-numpy implementations of the convolution data-movement kernels.

``im2col`` lowers padded feature maps to a patch matrix so the convolution
itself becomes one BLAS matmul; ``col2im`` is its transpose (scatter-add),
used by the backward pass. Patch rows are ordered (channel, ku, kv) so that
a kernel of layout [C_in, k, k, C_out] can be flattened with a plain
``reshape(C_in * k * k, C_out)``.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xp: np.ndarray, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """Gather k x k patches of xp [B,C,Hp,Wp] into [B, C*k*k, h_out*w_out]."""
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    windows = as_strided(
        xp,
        shape=(b, c, k, k, h_out, w_out),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return windows.reshape(b, c * k * k, h_out * w_out)


def col2im(
    cols: np.ndarray,
    c: int,
    k: int,
    stride: int,
    hp: int,
    wp: int,
    h_out: int,
    w_out: int,
) -> np.ndarray:
    """Scatter-add patch gradients [B, C*k*k, h_out*w_out] back to [B,C,Hp,Wp]."""
    b = cols.shape[0]
    grid = cols.reshape(b, c, k, k, h_out, w_out)
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            xp[:, :, u : u + h_out * stride : stride, v : v + w_out * stride : stride] += grid[
                :, :, u, v
            ]
    return xp
