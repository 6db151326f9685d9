# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the hot loops: fused Adam updates and trilinear resampling.

Must stay bit-identical to ``_native_py``: same operations, same order, no
reassociation (the extension is built with -ffp-contract=off so the compiler
cannot fuse multiply-adds).
"""
from libc.math cimport sqrt


def adam_update(double[::1] param, double[::1] grad,
                double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps,
                double bc1, double bc2):
    """Bias-corrected Adam update, in place, on flat float64 arrays."""
    cdef Py_ssize_t i, n = param.shape[0]
    cdef double g
    for i in range(n):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g * g)
        param[i] = param[i] - lr * ((m[i] / bc1) / (sqrt(v[i] / bc2) + eps))


def resize_kernel(double[:, :, ::1] src, double[:, :, ::1] dst,
                  Py_ssize_t[::1] z0, double[::1] fz,
                  Py_ssize_t[::1] y0, double[::1] fy,
                  Py_ssize_t[::1] x0, double[::1] fx):
    """Trilinear gather+lerp into ``dst`` from precomputed axis coordinates.

    Interpolates along x, then y, then z; each lerp is ``a + (b - a) * f``,
    matching the fallback expression tree exactly.
    """
    cdef Py_ssize_t D = src.shape[0], H = src.shape[1], W = src.shape[2]
    cdef Py_ssize_t td = dst.shape[0], th = dst.shape[1], tw = dst.shape[2]
    cdef Py_ssize_t k, j, i, za, zb, ya, yb, xa, xb
    cdef double gz, gy, gx
    cdef double v000, v001, v010, v011, v100, v101, v110, v111
    cdef double c00, c01, c10, c11, c0, c1
    for k in range(td):
        za = z0[k]
        zb = za + 1
        if zb > D - 1:
            zb = D - 1
        gz = fz[k]
        for j in range(th):
            ya = y0[j]
            yb = ya + 1
            if yb > H - 1:
                yb = H - 1
            gy = fy[j]
            for i in range(tw):
                xa = x0[i]
                xb = xa + 1
                if xb > W - 1:
                    xb = W - 1
                gx = fx[i]

                v000 = src[za, ya, xa]
                v001 = src[za, ya, xb]
                v010 = src[za, yb, xa]
                v011 = src[za, yb, xb]
                v100 = src[zb, ya, xa]
                v101 = src[zb, ya, xb]
                v110 = src[zb, yb, xa]
                v111 = src[zb, yb, xb]

                c00 = v000 + (v001 - v000) * gx
                c01 = v010 + (v011 - v010) * gx
                c10 = v100 + (v101 - v100) * gx
                c11 = v110 + (v111 - v110) * gx

                c0 = c00 + (c01 - c00) * gy
                c1 = c10 + (c11 - c10) * gy

                dst[k, j, i] = c0 + (c1 - c0) * gz
