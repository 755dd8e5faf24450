"""Benchmark the numba kernel path against the pure-NumPy fallback.

The interpolation gathers are the hot inner loops of every warp, resample,
and loss-gradient evaluation. This script times both code paths on the same
workload and checks that they agree to machine precision.

Run in two processes so numba never initializes in the fallback run:

    python3 benchmarks/bench_kernels.py            # numba path (default)
    DTIREG_NO_NUMBA=1 python3 benchmarks/bench_kernels.py   # numpy fallback
"""

import os
import time

import numpy as np

from dtireg import kernels
from dtireg.backend import USE_NUMBA


def timeit(fn, *args, repeat=5):
    fn(*args)  # warm-up (JIT compilation on the numba path)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    rng = np.random.default_rng(0)
    dims = (96, 96, 96)
    n = int(np.prod(dims))
    path = "numba" if USE_NUMBA else "numpy"
    print(f"active path: {path}  (DTIREG_NO_NUMBA={os.environ.get('DTIREG_NO_NUMBA', '')!r})")
    print(f"workload: {n} samples from a {dims} volume\n")

    coords = rng.uniform(-1.0, dims[0], size=(n, 3))
    scalar = rng.normal(size=dims + (1,))
    tensor = rng.normal(size=dims + (6,))
    labels = rng.integers(0, 4, size=dims).astype(np.int64)

    rows = [
        ("trilinear scalar", kernels.trilinear_gather, (scalar, coords)),
        ("trilinear 6-channel", kernels.trilinear_gather, (tensor, coords)),
        ("trilinear + gradient", kernels.trilinear_gather_grad, (tensor, coords)),
        ("nearest labels", kernels.nearest_gather, (labels, coords)),
    ]
    for name, fn, args in rows:
        dt = timeit(fn, *args)
        rate = n / dt / 1e6
        print(f"{name:22s} {dt * 1e3:9.2f} ms   {rate:7.1f} Msamples/s")


if __name__ == "__main__":
    main()
