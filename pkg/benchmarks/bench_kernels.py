"""Numba vs pure-numpy timings for the hot kernels.

Run:
    python benchmarks/bench_kernels.py [--repeat N]

Both backends are imported side by side from ``idifkin._kernels``; the
``IDIFKIN_BACKEND`` flag only decides which one the package uses by default.
Also checks that the two agree before timing them.
"""

import argparse
import timeit

import numpy as np
from scipy.stats import rankdata

from idifkin import _kernels
from idifkin.core import FineGrid, protocol_grid
from idifkin.input_functions import interp_to_fine
from idifkin.io import synth_bolus_idifs


def _best_ms(fn, repeat, number):
    return 1e3 * min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    grid = protocol_grid()
    fine = FineGrid.covering(grid, 0.5)
    a = interp_to_fine(synth_bolus_idifs(grid, seed=0).aorta, fine)
    k1, k2, k3, dt = 0.8 / 60, 0.6 / 60, 0.07 / 60, fine.step_s
    rng = np.random.default_rng(0)
    d = rng.normal(size=20)
    ranks2 = np.rint(2 * rankdata(np.abs(d))).astype(np.int64)
    w2 = int(min(ranks2[d > 0].sum(), ranks2[d < 0].sum()))

    cases = [
        ("tissue_response (7801 samples)", "tissue_response", (a, k1, k2, k3, dt), 200),
        ("rk4_two_compartment (7801 samples)", "rk4_two_compartment", (a, k1, k2, k3, dt), 20),
        ("signed_rank_null_count (n=20)", "signed_rank_null_count", (ranks2, w2), 2),
    ]
    print(f"numba available: {_kernels.HAVE_NUMBA}; package default backend: {_kernels.BACKEND}")
    print(f"{'kernel':38s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for label, name, inputs, number in cases:
        fn_numpy = getattr(_kernels, f"{name}_numpy")
        t_numpy = _best_ms(lambda: fn_numpy(*inputs), args.repeat, number)
        if _kernels.HAVE_NUMBA:
            fn_numba = getattr(_kernels, f"{name}_numba")
            ref, got = fn_numpy(*inputs), fn_numba(*inputs)  # also compiles
            # sup-norm relative: the FFT path leaves ~1e-16 noise on exact zeros
            if np.max(np.abs(ref - got)) > 1e-10 * max(1.0, np.max(np.abs(ref))):
                raise SystemExit(f"{name}: backends disagree")
            t_numba = _best_ms(lambda: fn_numba(*inputs), args.repeat, number)
            print(f"{label:38s} {t_numba:10.3f} {t_numpy:10.3f} {t_numpy / t_numba:7.1f}x")
        else:
            print(f"{label:38s} {'n/a':>10s} {t_numpy:10.3f} {'':>8s}")


if __name__ == "__main__":
    main()
