"""Benchmark the compiled kernels against the pure-numpy fallback.

Run with the package importable:

    python3 benchmarks/bench_kernels.py

Both backends produce bit-identical results (the parity tests assert this);
this script only reports speed, so numbers vary with the machine.
"""
import time

import numpy as np

from lungroute import kernels


def time_call(fn, repeat=5):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_resize():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(16, 64, 64))
    cases = [((8, 32, 32), 200), ((6, 24, 24), 200), ((16, 64, 64), 100)]
    print("resize_trilinear (16x64x64 source)")
    for target, reps in cases:
        t_py = time_call(lambda: [kernels.resize_trilinear(src, target, impl=kernels.fallback)
                                  for _ in range(reps)])
        line = f"  -> {str(target):>12}: fallback {t_py / reps * 1e3:7.3f} ms"
        if kernels.native is not None:
            t_c = time_call(lambda: [kernels.resize_trilinear(src, target, impl=kernels.native)
                                     for _ in range(reps)])
            line += f" | native {t_c / reps * 1e3:7.3f} ms | speedup {t_py / t_c:5.2f}x"
        print(line)


def bench_adam():
    rng = np.random.default_rng(1)
    shapes = [(256, 8192), (64, 256), (4, 64)]
    print("adam_update (one fused step over a parameter tensor)")
    for shape in shapes:
        g = rng.normal(size=shape)
        size = int(np.prod(shape))
        reps = max(1, 2_000_000 // size)

        def run(impl):
            p = np.zeros(shape)
            m = np.zeros(shape)
            v = np.zeros(shape)
            for step in range(1, reps + 1):
                bc1 = 1.0 - 0.9 ** step
                bc2 = 1.0 - 0.999 ** step
                kernels.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8,
                                    bc1, bc2, impl=impl)

        t_py = time_call(lambda: run(kernels.fallback))
        line = f"  {str(shape):>12}: fallback {t_py / reps * 1e3:7.3f} ms"
        if kernels.native is not None:
            t_c = time_call(lambda: run(kernels.native))
            line += f" | native {t_c / reps * 1e3:7.3f} ms | speedup {t_py / t_c:5.2f}x"
        print(line)


if __name__ == "__main__":
    print(f"active backend: {kernels.BACKEND}")
    if kernels.native is None:
        print("(compiled extension unavailable; timing the fallback only)")
    bench_resize()
    bench_adam()
