"""Pure-numpy patch extraction kernels (fallback for the compiled ``_kernels``)."""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xp, kh, kw, stride, ho, wo):
    """Gather sliding patches of a padded batch.

    ``xp`` is ``[B, C, Hp, Wp]``; the result is ``[C*kh*kw, B*ho*wo]`` with rows
    ordered ``(c, i, j)`` and columns ordered ``(b, oy, ox)``.
    """
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(c, kh, kw, b, ho, wo),
        strides=(sc, sh, sw, sb, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(c * kh * kw, b * ho * wo)


def col2im(cols, b, c, hp, wp, kh, kw, stride, ho, wo):
    """Scatter-add patches back onto a padded canvas (adjoint of ``im2col``)."""
    cols = np.asarray(cols, dtype=np.float64).reshape(c, kh, kw, b, ho, wo)
    out = np.zeros((b, c, hp, wp))
    view = out.transpose(1, 0, 2, 3)
    h_end = stride * (ho - 1) + 1
    w_end = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            view[:, :, i:i + h_end:stride, j:j + w_end:stride] += cols[:, i, j]
    return out
