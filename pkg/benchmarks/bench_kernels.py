"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best-of-N wall time per call for each
backend and the speedup.
"""
import argparse
import math
import timeit

import numpy as np

from pacconformal import kernels


def cases():
    rng = np.random.default_rng(0)
    imgs = rng.uniform(size=(200, 28, 28))
    angles = rng.uniform(-0.5, 0.5, 200)
    return {
        "bernoulli_kl": (lambda b: [b.bernoulli_kl(p, 0.1) for p in np.linspace(0, 1, 1000)], 1000),
        "kl_inverse_upper": (lambda b: [b.kl_inverse_upper(p, 0.05) for p in np.linspace(0, 0.9, 200)], 200),
        "betainc": (lambda b: [b.betainc(900.0 - j, j + 1.0, 0.9) for j in range(100)], 100),
        "log_beta_pdf": (lambda b: [b.log_beta_pdf(0.05, k, 1001.0 - k) for k in range(1, 1001)], 1000),
        "vovk_2b_index(n=1e4)": (lambda b: b.vovk_2b_index(0.1, 0.05, 10_000), 1),
        "rotate_bilinear(200x28x28)": (lambda b: b.rotate_bilinear(imgs, angles), 1),
    }


def best(fn, repeat):
    t = timeit.Timer(fn)
    n, _ = t.autorange()
    return min(t.repeat(repeat=repeat, number=n)) / n


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.compiled_backend is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    print(f"{'kernel':28s} {'python/call':>12s} {'cython/call':>12s} {'speedup':>8s}")
    for name, (fn, calls) in cases().items():
        py = best(lambda: fn(kernels.python_backend), args.repeat) / calls
        cy = best(lambda: fn(kernels.compiled_backend), args.repeat) / calls
        print(f"{name:28s} {py * 1e6:10.2f}us {cy * 1e6:10.2f}us {py / cy:7.1f}x")
    # sanity: both backends agree on what was timed
    assert math.isclose(kernels.python_backend.betainc(800, 101, 0.9),
                        kernels.compiled_backend.betainc(800, 101, 0.9), rel_tol=1e-12)


if __name__ == "__main__":
    main()
