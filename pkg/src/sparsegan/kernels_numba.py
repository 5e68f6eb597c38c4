"""JIT-compiled gather/scatter kernels for the convolution hot path.

The matrix products themselves go through BLAS either way; what these
kernels buy is a fused, allocation-light patch extraction (im2col) and
scatter-add (col2im), which is where the pure-numpy path pays for large
transposed copies and `np.add.at`.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(xp, kh, kw, stride, oh, ow):
    # xp is pre-padded NCHW; output rows follow (batch, oy, ox) order.
    n, ci, _, _ = xp.shape
    col = np.empty((n * oh * ow, ci * kh * kw), dtype=xp.dtype)
    for b in range(n):
        for y in range(oh):
            for z in range(ow):
                row = (b * oh + y) * ow + z
                q = 0
                for c in range(ci):
                    for i in range(kh):
                        iy = y * stride + i
                        for j in range(kw):
                            col[row, q] = xp[b, c, iy, z * stride + j]
                            q += 1
    return col


@njit(cache=True)
def col2im(dcol, n, ci, hp, wp, kh, kw, stride, oh, ow):
    # Adjoint of im2col: scatter-add rows back onto the padded image grid.
    dxp = np.zeros((n, ci, hp, wp), dtype=dcol.dtype)
    for b in range(n):
        for y in range(oh):
            for z in range(ow):
                row = (b * oh + y) * ow + z
                q = 0
                for c in range(ci):
                    for i in range(kh):
                        iy = y * stride + i
                        for j in range(kw):
                            dxp[b, c, iy, z * stride + j] += dcol[row, q]
                            q += 1
    return dxp
