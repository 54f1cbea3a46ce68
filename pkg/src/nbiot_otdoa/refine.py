"""Stage 2: sinc interpolation of the combined correlation and iterative MPD.

Only a window of ``2W + 1`` base-rate lags around the coarse ToA is
upsampled. Window sample ``m`` sits at fine lag ``(center - W) * V + m``;
lags outside the computed profile are treated as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels
from .correlate import ETA1
from .emsic import coherent_combine
from .prs import FS_HIGH, FS_LOW, UPSAMPLE, PrsPlan, prs_acf

SPEED_OF_LIGHT = 299_792_458.0
LOW_RATE_RESOLUTION_M = SPEED_OF_LIGHT / FS_LOW    # ~156.1 m per 1.92 MHz sample
HIGH_RATE_RESOLUTION_M = SPEED_OF_LIGHT / FS_HIGH  # ~9.76 m per Ts

HALF_WINDOW = 20
GAMMA_NOMINAL = 7.0
GAMMA = 2.2
MAX_PATHS = 8


@dataclass
class UpsampledWindow:
    values: np.ndarray
    V: int
    W: int
    center: int

    @property
    def length(self) -> int:
        return self.V * (2 * self.W + 1)

    @property
    def start_fine(self) -> int:
        """Fine-grid lag of window sample 0."""
        return (self.center - self.W) * self.V

    def fine_lag(self, m) -> np.ndarray:
        return self.start_fine + np.asarray(m)


@dataclass
class MpdResult:
    toa_fine: int
    paths_fine: list = field(default_factory=list)
    refinement_failed: bool = False


@lru_cache(maxsize=16)
def _sinc_matrix(W: int, V: int) -> np.ndarray:
    m = np.arange(V * (2 * W + 1))
    n = np.arange(-W, W + 1)
    mat = np.sinc(m[:, None] / V - W - n[None, :])
    mat.setflags(write=False)
    return mat


def upsample(profile, center: int, W: int = HALF_WINDOW, V: int = UPSAMPLE) -> UpsampledWindow:
    """Interpolate ``profile`` on ``V`` fine lags per base-rate lag.

    ``R_hat[m] = sum_{n=-W}^{W} R[center + n] sinc(m / V - W - n)``, so the
    integer grid point ``m = V (W + n0)`` reproduces ``R[center + n0]``.
    """
    profile = np.asarray(profile, dtype=complex)
    idx = np.arange(center - W, center + W + 1)
    ok = (idx >= 0) & (idx < profile.size)
    seg = np.zeros(idx.size, dtype=complex)
    seg[ok] = profile[idx[ok]]
    return UpsampledWindow(_sinc_matrix(W, V) @ seg, V, W, center)


def window_acf(plan: PrsPlan, window: UpsampledWindow) -> np.ndarray:
    """ACF on the fine grid covering every lag difference inside the window."""
    return prs_acf(plan, window.length - 1, window.V)


def mpd(window: UpsampledWindow, acf, gamma: float = GAMMA,
        max_paths: int = MAX_PATHS, par_reference: str = "initial") -> MpdResult:
    """Iterative multipath detection on an upsampled window.

    Repeatedly takes the largest sample, accepts it as a path while it beats
    ``gamma`` times the mean window magnitude, and removes that path by
    subtracting the peak-scaled ACF. The ToA is the earliest accepted path.
    If no path passes, the window centre (the coarse ToA) is returned with
    ``refinement_failed`` set.

    ``par_reference="initial"`` keeps the mean of the window as first
    upsampled for every test; ``"current"`` recomputes it on the updated
    profile after each subtraction.
    """
    acf = np.asarray(acf)
    if acf.size < 2 * window.length - 1:
        raise ValueError("ACF does not cover the window")
    mid = (acf.size - 1) // 2
    acf = acf[mid - (window.length - 1):mid + window.length]
    if par_reference == "initial":
        ref = float(np.abs(window.values).mean())
    elif par_reference == "current":
        ref = 0.0
    else:
        raise ValueError(f"unknown par_reference {par_reference!r}")
    if ref == 0.0 and par_reference == "initial":
        return MpdResult(window.center * window.V, [], True)
    paths, _ = kernels.mpd_paths(window.values, acf, gamma, max_paths, ref)
    if paths.size == 0:
        return MpdResult(window.center * window.V, [], True)
    fine = window.fine_lag(paths).tolist()
    return MpdResult(int(min(fine)), fine, False)


def threshold_window_toa(window: UpsampledWindow, eta1: float = ETA1) -> int:
    """First-crossing rule applied to the upsampled window (fine-lag result)."""
    mag = np.abs(window.values)
    hit = np.flatnonzero(mag / mag.max() > eta1) if eta1 < 1 else [int(np.argmax(mag))]
    return int(window.fine_lag(hit[0]))


def refine_report(report, plan: PrsPlan, W: int = HALF_WINDOW, V: int = UPSAMPLE,
                  gamma: float = GAMMA, max_paths: int = MAX_PATHS, profile=None,
                  par_reference: str = "initial", method: str = "mpd",
                  eta1: float = ETA1):
    """Fill ``refined_toa_ts`` of a detected stage-1 report in place.

    By default the window is taken from the per-symbol profiles derotated
    with the cell's single FO estimate. Per-lag FO values are noisy away from
    the peak and would distort the window shape. ``method="threshold"``
    applies the first-crossing rule to the same window instead of MPD.
    """
    if not report.detected:
        return report
    if profile is None:
        profile = coherent_combine(report.correlation.per_symbol, report.fo_estimate,
                                   plan.prs_symbol_indices, plan.fft_size, plan.symbol_len)
    win = upsample(profile, report.coarse_toa, W, V)
    if method == "mpd":
        res = mpd(win, window_acf(plan, win), gamma, max_paths, par_reference)
    elif method == "threshold":
        toa = threshold_window_toa(win, eta1)
        res = MpdResult(toa, [toa], False)
    else:
        raise ValueError(f"unknown refinement method {method!r}")
    report.refined_toa_ts = float(res.toa_fine) * (UPSAMPLE / V)
    report.paths_ts = [p * (UPSAMPLE / V) for p in res.paths_fine]
    report.refinement_failed = res.refinement_failed
    return report


def refined_window(report, plan: PrsPlan, W: int = HALF_WINDOW, V: int = UPSAMPLE):
    """The upsampled window :func:`refine_report` works on, for export."""
    profile = coherent_combine(report.correlation.per_symbol, report.fo_estimate,
                               plan.prs_symbol_indices, plan.fft_size, plan.symbol_len)
    return upsample(profile, report.coarse_toa, W, V)


def write_window_csv(path, window: UpsampledWindow):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "fine_lag", "abs"])
        for m, v in enumerate(window.values):
            w.writerow([m, int(window.fine_lag(m)), f"{abs(v):.9g}"])
