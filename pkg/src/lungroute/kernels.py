"""Kernel backend selection and the array-facing kernel API.

The compiled extension (``lungroute._native``) is used when it imported
cleanly and LUNGROUTE_NO_NATIVE is unset; otherwise the numpy fallback
(``lungroute._native_py``) takes over.  Both produce bit-identical output,
so the choice affects speed only.  ``benchmarks/bench_kernels.py`` times the
two side by side.
"""
from __future__ import annotations

import os

import numpy as np

from lungroute import _native_py as fallback

try:
    from lungroute import _native as native
except ImportError:  # extension not built
    native = None

if native is not None and not os.environ.get("LUNGROUTE_NO_NATIVE"):
    _impl = native
    BACKEND = "native"
else:
    _impl = fallback
    BACKEND = "fallback"


def backend_name() -> str:
    """Active backend: "native" (compiled) or "fallback" (numpy)."""
    return BACKEND


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2, impl=None):
    """Fused in-place Adam update on one parameter tensor (any shape).

    ``bc1``/``bc2`` are the bias-correction denominators 1-beta1^t, 1-beta2^t.
    """
    impl = impl or _impl
    impl.adam_update(
        param.reshape(-1), np.ascontiguousarray(grad, dtype=np.float64).reshape(-1),
        m.reshape(-1), v.reshape(-1),
        float(lr), float(beta1), float(beta2), float(eps), float(bc1), float(bc2),
    )


def axis_coords(src_len: int, dst_len: int):
    """Corner-aligned source coordinates for one axis of a trilinear resize.

    Returns (lower index, fractional offset) per output position.  A
    single-sample target axis reads the source centre, since corner
    alignment is undefined there.
    """
    if dst_len == 1:
        pos = np.full(1, 0.5 * (src_len - 1), dtype=np.float64)
    else:
        pos = np.arange(dst_len, dtype=np.float64) * (src_len - 1) / (dst_len - 1)
    i0 = np.floor(pos).astype(np.intp)
    np.clip(i0, 0, max(src_len - 2, 0), out=i0)
    frac = pos - i0
    # positions that land exactly on the last sample gather it directly
    # instead of lerping with fraction 1, keeping endpoints bit-exact
    at_end = frac >= 1.0
    i0[at_end] += 1
    frac[at_end] = 0.0
    return i0, frac


def resize_trilinear(vox: np.ndarray, target_dims, impl=None) -> np.ndarray:
    """Trilinear, corner-aligned resample of a 3-D grid to ``target_dims``.

    Input may be any real dtype; computation and output are float64.
    """
    impl = impl or _impl
    src = np.ascontiguousarray(vox, dtype=np.float64)
    td, th, tw = (int(t) for t in target_dims)
    z0, fz = axis_coords(src.shape[0], td)
    y0, fy = axis_coords(src.shape[1], th)
    x0, fx = axis_coords(src.shape[2], tw)
    dst = np.empty((td, th, tw), dtype=np.float64)
    impl.resize_kernel(src, dst, z0, fz, y0, fy, x0, fx)
    return dst
