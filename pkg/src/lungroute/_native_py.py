"""Pure-numpy implementations of the hot kernels.

Selected by :mod:`lungroute.kernels` when the compiled extension is missing
(or disabled via LUNGROUTE_NO_NATIVE).  Every expression here is written to
perform the same float64 operations in the same order as the Cython loops in
``_native.pyx``, so the two backends produce bit-identical results; the
parity tests rely on that.
"""
from __future__ import annotations

import numpy as np


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """Bias-corrected Adam update, in place, on flat float64 arrays."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    denom = np.sqrt(v / bc2)
    denom += eps
    param -= lr * ((m / bc1) / denom)


def resize_kernel(src, dst, z0, fz, y0, fy, x0, fx):
    """Trilinear gather+lerp into ``dst`` from precomputed axis coordinates.

    ``z0``/``y0``/``x0`` are lower corner indices (intp, already clamped so
    that index+1 is valid), ``fz``/``fy``/``fx`` the fractional offsets.
    Interpolates along x, then y, then z; each lerp is ``a + (b - a) * f``.
    """
    z1 = np.minimum(z0 + 1, src.shape[0] - 1)
    y1 = np.minimum(y0 + 1, src.shape[1] - 1)
    x1 = np.minimum(x0 + 1, src.shape[2] - 1)

    zz0 = z0[:, None, None]
    zz1 = z1[:, None, None]
    yy0 = y0[None, :, None]
    yy1 = y1[None, :, None]
    xx0 = x0[None, None, :]
    xx1 = x1[None, None, :]

    v000 = src[zz0, yy0, xx0]
    v001 = src[zz0, yy0, xx1]
    v010 = src[zz0, yy1, xx0]
    v011 = src[zz0, yy1, xx1]
    v100 = src[zz1, yy0, xx0]
    v101 = src[zz1, yy0, xx1]
    v110 = src[zz1, yy1, xx0]
    v111 = src[zz1, yy1, xx1]

    fxx = fx[None, None, :]
    fyy = fy[None, :, None]
    fzz = fz[:, None, None]

    c00 = v000 + (v001 - v000) * fxx
    c01 = v010 + (v011 - v010) * fxx
    c10 = v100 + (v101 - v100) * fxx
    c11 = v110 + (v111 - v110) * fxx

    c0 = c00 + (c01 - c00) * fyy
    c1 = c10 + (c11 - c10) * fyy

    dst[...] = c0 + (c1 - c0) * fzz
