"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Sizes match one training step (batch 64, 10 classes), one mixture E-step
over an estimation table (4000 losses) and one 16x16 raster op.
"""

import argparse
import time

import numpy as np

from resmooth import kernels


def best_of(fn, args, repeat):
    fn(*args)  # warm-up, includes compilation for the numba side
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    logits = rng.normal(size=(64, 10))
    labels = rng.integers(0, 10, 64)
    alphas = rng.random(64) * 0.4
    weights = np.full(64, 1 / 64)
    x = np.concatenate([rng.normal(-4, 0.5, 2800), rng.normal(0, 0.7, 1200)])
    mu, sigma, pi = np.array([-4.0, 0.0]), np.array([0.5, 0.7]), np.array([0.7, 0.3])
    img = rng.integers(0, 256, size=(16, 16, 1), dtype=np.uint8)
    return {
        "smoothed_xent": (kernels.np_smoothed_xent, kernels.nb_smoothed_xent, (logits, labels, alphas, weights)),
        "gmm2_estep": (kernels.np_gmm2_estep, kernels.nb_gmm2_estep, (x, mu, sigma, pi)),
        "smooth3": (kernels.np_smooth3, kernels.nb_smooth3, (img,)),
        "equalize": (kernels.np_equalize, kernels.nb_equalize, (img,)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    if not kernels._HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<15}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, (np_fn, nb_fn, fargs) in cases(np.random.default_rng(0)).items():
        t_np = best_of(np_fn, fargs, args.repeat)
        t_nb = best_of(nb_fn, fargs, args.repeat)
        print(f"{name:<15}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
