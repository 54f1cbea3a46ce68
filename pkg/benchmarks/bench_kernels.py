"""Time the compiled and numpy kernel backends on detector-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from nbiot_otdoa import kernels
from nbiot_otdoa.airlink import CellLink, noise_variance_for_snr, superpose
from nbiot_otdoa.emsic import BLUE_WEIGHTS
from nbiot_otdoa.prs import plan_for
from nbiot_otdoa.refine import upsample, window_acf


def workloads():
    plan = plan_for(8)
    y = superpose([CellLink.from_ts(plan, 480)], noise_variance_for_snr(plan, 0), seed=1)
    starts = np.array([ell * plan.symbol_len for ell in plan.prs_symbol_indices], np.int64)
    tmpl = np.ascontiguousarray(plan.time_waveforms)
    prof = np.ascontiguousarray(np.random.default_rng(0).standard_normal((8, 128)) + 0j)
    sym = np.asarray(plan.prs_symbol_indices, dtype=np.int64)
    win = upsample(prof.sum(0), 60)
    acf = window_acf(plan, win)
    mid = (acf.size - 1) // 2
    acf = np.ascontiguousarray(acf[mid - (win.length - 1):mid + win.length])
    ref = float(np.abs(win.values).mean())
    return {
        "correlate_symbols": lambda m: m.correlate_symbols(y.samples, tmpl, starts, 128),
        "blue_fo_lags": lambda m: m.blue_fo_lags(prof, sym, BLUE_WEIGHTS, 128.0, 137.0),
        "mpd_paths": lambda m: m.mpd_paths(win.values, acf, 1.0, 8, ref),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    impls = kernels.implementations()
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':20s}" + "".join(f"{name:>14s}" for name in impls) + "     speedup")
    for name, fn in workloads().items():
        times = {}
        for impl_name, mod in impls.items():
            fn(mod)
            t = min(timeit.repeat(lambda: fn(mod), number=args.repeat, repeat=3))
            times[impl_name] = t / args.repeat * 1e6
        cols = "".join(f"{times[k]:11.1f} us" for k in impls)
        speed = (f"{times['python'] / times['cython']:10.1f}x" if "cython" in times else "")
        print(f"{name:20s}{cols}{speed}")


if __name__ == "__main__":
    main()
