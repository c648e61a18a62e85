"""Compare the numba and numpy backends of the counting kernels.

Run with ``python benchmarks/bench_kernels.py [--samples N] [--repeat R]``.
"""

import argparse
import timeit

import numpy as np

from autransfer import _kernels


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=20_000)
    ap.add_argument("--aus", type=int, default=12)
    ap.add_argument("--grid-points", type=int, default=99)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    scores = rng.random((args.samples, args.aus))
    labels = (rng.random((args.samples, args.aus)) < 0.3).astype(np.int8)
    pred = (scores >= 0.5).astype(np.int8)
    grid = np.linspace(0.01, 0.99, args.grid_points)
    thresholds = np.full(args.aus, 0.5)

    cases = {
        "confusion_counts": (_kernels.confusion_counts_numpy, _kernels.confusion_counts_numba, (pred, labels)),
        "grid_counts": (_kernels.grid_counts_numpy, _kernels.grid_counts_numba, (scores, labels, grid)),
        "apply_thresholds": (_kernels.apply_thresholds_numpy, _kernels.apply_thresholds_numba, (scores, thresholds)),
    }
    print(f"samples={args.samples} aus={args.aus} grid_points={args.grid_points} numba_available={_kernels.HAVE_NUMBA}")
    print(f"{'kernel':<18}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, (np_fn, nb_fn, fn_args) in cases.items():
        ref = np_fn(*fn_args)
        t_np = min(timeit.repeat(lambda: np_fn(*fn_args), number=1, repeat=args.repeat)) * 1e3
        if _kernels.HAVE_NUMBA:
            assert np.array_equal(nb_fn(*fn_args), ref)  # also triggers compilation
            t_nb = min(timeit.repeat(lambda: nb_fn(*fn_args), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:<18}{t_np:>12.2f}{t_nb:>12.2f}{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<18}{t_np:>12.2f}{'n/a':>12}{'':>10}")


if __name__ == "__main__":
    main()
