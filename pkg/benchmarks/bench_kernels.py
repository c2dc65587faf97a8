"""Compare the compiled and pure-numpy bilinear sampling kernels.

Usage: python3 benchmarks/bench_kernels.py [--size 520] [--channels 2] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from warpc import _kernels_py, kernels


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=520)
    ap.add_argument("--channels", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n = args.size
    src = rng.normal(size=(n, n, args.channels))
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    x = xs + rng.uniform(-8, 8, (n, n))
    y = ys + rng.uniform(-8, 8, (n, n))
    g = rng.normal(size=(n, n, args.channels))

    impls = {"python": _kernels_py}
    try:
        from warpc import _kernels
        impls["cython"] = _kernels
    except ImportError:
        print("compiled kernels not built; only the python backend is timed")

    print(f"default backend: {kernels.BACKEND}; grid {n}x{n}x{args.channels}")
    print(f"{'backend':<8}{'forward ms':>12}{'backward ms':>13}")
    times = {}
    for name, mod in impls.items():
        fwd = min(timeit.repeat(lambda: mod.bilinear_sample(src, x, y),
                                number=1, repeat=args.repeat))
        bwd = min(timeit.repeat(lambda: mod.bilinear_sample_backward(src, x, y, g),
                                number=1, repeat=args.repeat))
        times[name] = (fwd, bwd)
        print(f"{name:<8}{1e3 * fwd:>12.2f}{1e3 * bwd:>13.2f}")
    if len(times) == 2:
        out_c, val_c = impls["cython"].bilinear_sample(src, x, y)
        out_p, val_p = impls["python"].bilinear_sample(src, x, y)
        print(f"speed-up: forward {times['python'][0] / times['cython'][0]:.1f}x, "
              f"backward {times['python'][1] / times['cython'][1]:.1f}x; "
              f"max |diff| {np.max(np.abs(out_c - out_p)):.2e}, "
              f"masks equal: {bool(np.array_equal(val_c, val_p))}")


if __name__ == "__main__":
    main()
