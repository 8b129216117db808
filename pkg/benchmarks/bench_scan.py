"""Time the selective-scan kernels: compiled vs numpy, sequential vs Blelloch.

    python benchmarks/bench_scan.py [--repeat 5] [--dtype float32]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from diffmamba import kernels

SHAPES = [  # (batch, length, channels, state)
    (1, 64, 16, 16),
    (8, 128, 64, 16),
    (8, 512, 64, 16),
    (4, 1024, 128, 16),
]


def inputs(shape, dtype, seed=0):
    B, L, D, N = shape
    rng = np.random.default_rng(seed)
    abar = rng.uniform(0.5, 1.0, (B, L, D, N)).astype(dtype)
    bbar = (rng.standard_normal((B, L, D, N)) * 0.1).astype(dtype)
    C = rng.standard_normal((B, L, N)).astype(dtype)
    x = rng.standard_normal((B, L, D)).astype(dtype)
    return abar, bbar, C, x


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    args = ap.parse_args(argv)
    backends = sorted(kernels.available_backends())
    print(f"backends: {', '.join(backends)}; dtype {args.dtype}; best of {args.repeat}")
    print(f"{'shape (B,L,D,N)':<22}{'backend':<9}{'mode':<12}{'fwd ms':>10}{'bwd ms':>10}")
    for shape in SHAPES:
        abar, bbar, C, x = inputs(shape, np.dtype(args.dtype))
        gy = np.ones_like(x)
        for name in backends:
            impl = kernels.get_backend(name)
            for parallel in (False, True):
                _, h = impl.forward(abar, bbar, C, x, parallel)
                fwd = best_of(lambda: impl.forward(abar, bbar, C, x, parallel), args.repeat)
                bwd = best_of(lambda: impl.backward(abar, bbar, C, x, h, gy, parallel), args.repeat)
                mode = "parallel" if parallel else "sequential"
                print(f"{str(shape):<22}{name:<9}{mode:<12}{fwd * 1e3:>10.2f}{bwd * 1e3:>10.2f}")


if __name__ == "__main__":
    main()
