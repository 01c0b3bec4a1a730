"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Both backends run on identical inputs; the script also checks that their
outputs agree before reporting timings.
"""
import argparse
import timeit

import numpy as np

from famda import _kernels_py

try:
    from famda import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def cases(rng):
    img = rng.random((64, 64, 3))
    flat = rng.random(64 * 64) < 0.5
    labels = rng.integers(0, 5, 64 * 64)
    labels[rng.random(64 * 64) < 0.05] = 255
    probs = rng.dirichlet(np.ones(5), 64 * 64)
    masks = [np.flatnonzero(rng.random(64 * 64) < p) for p in rng.uniform(0.01, 0.3, 40)]
    return {
        "window_stats 64x64": lambda k: k.window_stats(img),
        "mask_runs 4096": lambda k: k.mask_runs(flat),
        "vote_refine 40 masks": lambda k: k.vote_refine(labels, probs, masks, 255),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=200)
    args = p.parse_args()
    backends = [("python", _kernels_py)] + ([("cython", _kernels_c)] if _kernels_c else [])
    if _kernels_c is None:
        print("extension not built; timing the python backend only")
    print(f"{'kernel':<22} " + " ".join(f"{name + ' us':>12}" for name, _ in backends) + "  speedup")
    for label, fn in cases(np.random.default_rng(0)).items():
        if _kernels_c is not None and not same(fn(_kernels_py), fn(_kernels_c)):
            raise SystemExit(f"{label}: backends disagree")
        times = [min(timeit.repeat(lambda: fn(k), number=args.repeat, repeat=3)) / args.repeat * 1e6
                 for _, k in backends]
        speed = f"{times[0] / times[1]:7.1f}x" if len(times) == 2 else ""
        print(f"{label:<22} " + " ".join(f"{t:12.1f}" for t in times) + "  " + speed)


if __name__ == "__main__":
    main()
