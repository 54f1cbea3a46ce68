"""Per-symbol PRS correlation, the presence gate and the threshold ToA rule.

The presence gate and :func:`threshold_toa` together form the conventional
detector without interference cancellation that the EM-SIC receiver is
compared against.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from .prs import N_SYM, PrsPlan

ETA1 = 0.8
ETA2 = 3.0


@dataclass
class CorrelationSet:
    per_symbol: np.ndarray              # (8, n_lags)
    cell_id: int
    combined: np.ndarray | None = None  # set after FO-corrected combining

    @property
    def n_lags(self) -> int:
        return self.per_symbol.shape[1]

    def plain_sum(self) -> np.ndarray:
        return self.per_symbol.sum(axis=0)

    def noncoherent_sum(self) -> np.ndarray:
        return np.abs(self.per_symbol).sum(axis=0)


def n_lags_for(y, plan: PrsPlan) -> int:
    n = len(y) - N_SYM * plan.symbol_len
    if n < 1:
        raise ValueError(f"received buffer of {len(y)} samples is shorter than one subframe")
    return n


def _samples(y):
    return getattr(y, "samples", y)


def correlate_symbol(y, plan: PrsPlan, s: int, n_lags: int | None = None) -> np.ndarray:
    """R_{p,l(s)}[n] = sum_k y[l(s) M + n + k] conj(s_{p,l(s)}[k]) for n < n_lags."""
    y = _samples(y)
    if n_lags is None:
        n_lags = n_lags_for(y, plan)
    m = plan.symbol_len
    start = plan.prs_symbol_indices[s] * m
    if start + n_lags - 1 + m > len(y):
        raise ValueError("received buffer too short for the lag range")
    return kernels.correlate_symbols(y, plan.time_waveforms[s:s + 1], [start], n_lags)[0]


def correlate_all(y, plan: PrsPlan, n_lags: int | None = None) -> CorrelationSet:
    y = _samples(y)
    if n_lags is None:
        n_lags = n_lags_for(y, plan)
    starts = np.asarray(plan.prs_symbol_indices) * plan.symbol_len
    prof = kernels.correlate_symbols(y, plan.time_waveforms, starts, n_lags)
    return CorrelationSet(prof, plan.pci)


def gate_ratio(profiles: CorrelationSet, form: str = "literal") -> float:
    """Peak-to-average statistic tested by :func:`presence_gate`.

    ``literal`` compares the peak of the sum of magnitudes with the mean
    magnitude of the plain sum. ``coherent`` uses the magnitude of the plain
    sum on both sides.
    """
    coherent = np.abs(profiles.plain_sum())
    mean = coherent.mean()
    if form == "literal":
        peak = profiles.noncoherent_sum().max()
    elif form == "coherent":
        peak = coherent.max()
    else:
        raise ValueError(f"unknown gate form {form!r}")
    if mean == 0:
        return np.inf if peak > 0 else 0.0
    return float(peak / mean)


def presence_gate(profiles: CorrelationSet, eta2: float = ETA2, form: str = "literal") -> bool:
    if eta2 <= 0:
        return True
    return gate_ratio(profiles, form) > eta2


def threshold_toa(combined, eta1: float = ETA1) -> int:
    """Smallest lag whose normalised |combined| exceeds ``eta1``.

    At ``eta1 = 1`` the comparison is relaxed to ``>=`` so the peak itself
    qualifies.
    """
    mag = np.abs(np.asarray(combined))
    peak = mag.max()
    if peak == 0:
        return 0
    norm = mag / peak
    hit = norm >= eta1 if eta1 >= 1 else norm > eta1
    return int(np.flatnonzero(hit)[0])


def write_profile_csv(path, profile):
    """Lag profile as CSV rows (lag, |R|, arg R)."""
    profile = np.asarray(profile)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lag", "abs", "arg"])
        for n, r in enumerate(profile):
            w.writerow([n, f"{abs(r):.9g}", f"{np.angle(r):.9g}"])
