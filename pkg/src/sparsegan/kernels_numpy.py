"""Pure-numpy fallbacks for the convolution gather/scatter kernels.

Same contracts as kernels_numba; selected when numba is unavailable or
SPARSEGAN_BACKEND=numpy.
"""

import numpy as np


def im2col(xp, kh, kw, stride, oh, ow):
    n, ci, _, _ = xp.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, ci, oh, ow, kh, kw)
    return np.ascontiguousarray(
        win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, ci * kh * kw)
    )


def col2im(dcol, n, ci, hp, wp, kh, kw, stride, oh, ow):
    dxp = np.zeros((n, ci, hp, wp), dtype=dcol.dtype)
    dcol6 = dcol.reshape(n, oh, ow, ci, kh, kw)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                dcol6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dxp
