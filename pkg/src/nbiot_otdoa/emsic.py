"""Stage 1: iterative EM-SIC estimation of residual FO, strongest path and channel.

For each cell in turn the receiver correlates against the current residual,
estimates the residual FO per lag with a BLUE over symbol-pair phase
differences, combines the 8 PRS symbols coherently, picks the strongest lag,
estimates the channel tap, regenerates the cell's PRS and subtracts it. A
global iteration adds each cell's previous contribution back before
re-estimating it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .correlate import ETA1, ETA2, CorrelationSet, correlate_all, gate_ratio, threshold_toa
from .prs import N_PRS, PrsPlan

# samples whose |s| falls below this fraction of the symbol RMS are skipped
# when dividing by the waveform
ZERO_GUARD = 1e-6


def blue_weights(n_sym: int = N_PRS) -> np.ndarray:
    """Combining weights for lag-m phase differences, m = 1..n_sym/2."""
    k = n_sym
    h = n_sym // 2
    m = np.arange(1, h + 1)
    num = 3.0 * ((k - m) * (k - m + 1) - h * (k - h))
    den = h * (4.0 * h * h - 6.0 * k * h + 3.0 * k * k - 1.0)
    return num / den


BLUE_WEIGHTS = blue_weights()


def blue_fo(profiles, symbols, fft_size: int, symbol_len: int, weights=BLUE_WEIGHTS):
    """Per-lag residual FO estimate from the 8 per-symbol correlation profiles.

    ``profiles`` is ``(8, n_lags)`` (or ``(8,)`` for one lag). The lag-m
    product is ``conj(R_s) R_{s+m}`` so a received phase ramp
    ``exp(+j 2 pi eps M l / N)`` yields ``+eps``. A zero product contributes
    angle 0.
    """
    profiles = np.asarray(profiles, dtype=complex)
    single = profiles.ndim == 1
    if single:
        profiles = profiles[:, None]
    eps = kernels.blue_fo_lags(profiles, symbols, weights, fft_size, symbol_len)
    return float(eps[0]) if single else eps


def coherent_combine(profiles, eps, symbols, fft_size: int, symbol_len: int) -> np.ndarray:
    """FO-corrected coherent sum of the per-symbol profiles.

    ``eps`` may be a scalar or one value per lag.
    """
    profiles = np.asarray(profiles, dtype=complex)
    symbols = np.asarray(symbols)
    gaps = (symbols - symbols[0])[:, None]
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (profiles.shape[1],))[None, :]
    rot = np.exp(-2j * np.pi * eps * symbol_len * gaps / fft_size)
    return (rot * profiles).sum(axis=0)


def strongest_path(combined, eps_per_lag=None) -> tuple[int, float]:
    """Lag of the largest |R_p| (first on ties) and the FO estimate there."""
    n = int(np.argmax(np.abs(combined)))
    eps = 0.0 if eps_per_lag is None else float(np.asarray(eps_per_lag)[n])
    return n, eps


def _symbol_spans(plan: PrsPlan, toa: int):
    m = plan.symbol_len
    j = np.arange(m)
    return [(ell * m + toa + j, plan.time_waveforms[s])
            for s, ell in enumerate(plan.prs_symbol_indices)]


def regenerate(plan: PrsPlan, h: complex, toa: int, eps: float, length: int) -> np.ndarray:
    """Cell's PRS subframe as the receiver would see it for (h, toa, eps)."""
    out = np.zeros(length, dtype=complex)
    n = plan.fft_size
    for t, wave in _symbol_spans(plan, toa):
        out[t] += h * wave * np.exp(2j * np.pi * eps * t / n)
    return out


def lmmse_shrink(h_raw: complex, noise: float) -> complex:
    if h_raw == 0:
        return 0j
    return h_raw / (1.0 + noise / abs(h_raw) ** 2)


def estimate_channel(y, plan: PrsPlan, toa: int, eps: float):
    """Raw tap, residual noise power and LMMSE-shrunk tap of the strongest path.

    Returns ``(h_raw, noise, h_lmmse)``. The raw tap averages the derotated
    ratio ``y / s`` over the 8 symbols; samples where the two-tone waveform
    nearly vanishes are skipped.
    """
    y = getattr(y, "samples", y)
    n = plan.fft_size
    ratios, rows = [], []
    for t, wave in _symbol_spans(plan, toa):
        if t[-1] >= len(y):
            raise ValueError("received buffer too short for this delay")
        derot = np.exp(-2j * np.pi * eps * t / n)
        rms = np.sqrt(np.mean(np.abs(wave) ** 2))
        ok = np.abs(wave) > ZERO_GUARD * rms
        ratios.append((y[t][ok] / wave[ok]) * derot[ok])
        rows.append((t, wave))
    h_raw = complex(np.concatenate(ratios).mean())
    resid = [y[t] - h_raw * wave * np.exp(2j * np.pi * eps * t / n) for t, wave in rows]
    noise = float(np.mean(np.abs(np.concatenate(resid)) ** 2))
    return h_raw, noise, lmmse_shrink(h_raw, noise)


class SicState:
    """Residual stream plus the components subtracted from it, per cell."""

    def __init__(self, y):
        y = np.asarray(getattr(y, "samples", y), dtype=complex)
        self.original = y.copy()
        self.residual = y.copy()
        self.components: dict[int, np.ndarray] = {}
        self.iteration = 0

    def subtract(self, key: int, component: np.ndarray):
        if key in self.components:
            raise ValueError(f"cell {key} already subtracted; add it back first")
        self.components[key] = component
        self.residual -= component

    def add_back(self, key: int) -> bool:
        comp = self.components.pop(key, None)
        if comp is None:
            return False
        self.residual += comp
        return True

    def bookkeeping_error(self) -> float:
        """Relative mismatch of residual + subtractions against the input."""
        total = self.residual.copy()
        for comp in self.components.values():
            total += comp
        scale = np.linalg.norm(self.original)
        return float(np.linalg.norm(total - self.original) / (scale if scale else 1.0))


@dataclass
class CellReport:
    index: int
    cell_id: int
    detected: bool = False
    coarse_toa: int | None = None
    fo_estimate: float | None = None
    raw_channel: complex | None = None
    lmmse_channel: complex | None = None
    noise_estimate: float | None = None
    fo_per_lag: np.ndarray | None = field(default=None, repr=False)
    peak: float = 0.0
    gate: float = 0.0
    correlation: CorrelationSet | None = field(default=None, repr=False)
    refined_toa_ts: float | None = None
    refinement_failed: bool = False
    paths_ts: list = field(default_factory=list)

    def clear_estimates(self):
        self.detected = False
        self.coarse_toa = self.fo_estimate = None
        self.raw_channel = self.lmmse_channel = self.noise_estimate = None


@dataclass
class Stage1Result:
    reports: list[CellReport]
    state: SicState
    trace: list[dict]


def _combine(cs: CorrelationSet, plan: PrsPlan, use_foc: bool):
    if not use_foc:
        return cs.plain_sum(), np.zeros(cs.n_lags)
    eps = blue_fo(cs.per_symbol, plan.prs_symbol_indices, plan.fft_size, plan.symbol_len)
    return coherent_combine(cs.per_symbol, eps, plan.prs_symbol_indices,
                            plan.fft_size, plan.symbol_len), eps


def gate_statistic(cs: CorrelationSet, combined, form: str) -> float:
    """Peak-to-average of the detector's own combined profile (``coherent``)
    or the literal mixed form on the raw per-symbol profiles."""
    if form == "literal":
        return gate_ratio(cs, "literal")
    mag = np.abs(combined)
    mean = mag.mean()
    return float(mag.max() / mean) if mean > 0 else 0.0


def run_stage1(y, plans, iterations: int = 2, eta1: float = ETA1, eta2: float = ETA2,
               use_sic: bool = True, use_foc: bool = True, gate_form: str = "coherent",
               n_lags: int | None = None, check_bookkeeping: bool = False) -> Stage1Result:
    """Run the global EM-SIC loop over all cells.

    Cells are processed strongest first (largest combined-correlation peak,
    re-ranked every global iteration). A cell failing the gate is skipped for
    the current iteration only and retried in the next. ``eta1`` is unused by
    the peak-picking stage and kept for signature symmetry with the baseline.
    """
    del eta1
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    state = SicState(y)
    reports = [CellReport(i, plan.pci) for i, plan in enumerate(plans)]
    trace = []

    ranking = {}
    for i, plan in enumerate(plans):
        cs = correlate_all(state.residual, plan, n_lags)
        ranking[i] = float(np.abs(_combine(cs, plan, use_foc)[0]).max())

    for it in range(iterations):
        state.iteration = it
        order = sorted(ranking, key=lambda i: (-ranking[i], i))
        for i in order:
            plan, rep = plans[i], reports[i]
            state.add_back(i)
            cs = correlate_all(state.residual, plan, n_lags)
            combined, eps_lags = _combine(cs, plan, use_foc)
            toa, eps = strongest_path(combined, eps_lags)
            cs.combined = combined
            rep.correlation = cs
            rep.fo_per_lag = eps_lags
            rep.peak = float(abs(combined[toa]))
            rep.gate = gate_statistic(cs, combined, gate_form)
            ranking[i] = rep.peak
            row = {"iteration": it, "cell": plan.pci, "peak": rep.peak, "gate": rep.gate,
                   "toa": toa, "fo": eps}
            if not rep.gate > eta2:
                rep.clear_estimates()
                row.update(detected=False, h_abs=0.0, noise=0.0)
                trace.append(row)
                continue
            h_raw, noise, h_mmse = estimate_channel(state.residual, plan, toa, eps)
            rep.detected = True
            rep.coarse_toa, rep.fo_estimate = toa, eps
            rep.raw_channel, rep.noise_estimate, rep.lmmse_channel = h_raw, noise, h_mmse
            if use_sic:
                state.subtract(i, regenerate(plan, h_mmse, toa, eps, state.residual.size))
            if check_bookkeeping:
                err = state.bookkeeping_error()
                if err > 1e-10:
                    raise AssertionError(f"SIC bookkeeping drift {err:.3g}")
            row.update(detected=True, h_abs=abs(h_mmse), noise=noise)
            trace.append(row)
    return Stage1Result(reports, state, trace)


def detect_no_ic(y, plans, eta1: float = ETA1, eta2: float = ETA2,
                 gate_form: str = "coherent", n_lags: int | None = None) -> list[CellReport]:
    """Conventional detector: presence gate plus the threshold ToA rule, no SIC/FOC."""
    y = getattr(y, "samples", y)
    reports = []
    for i, plan in enumerate(plans):
        cs = correlate_all(y, plan, n_lags)
        combined = cs.plain_sum()
        cs.combined = combined
        rep = CellReport(i, plan.pci, correlation=cs, fo_per_lag=np.zeros(cs.n_lags))
        rep.peak = float(np.abs(combined).max())
        rep.gate = gate_statistic(cs, combined, gate_form)
        if rep.gate > eta2:
            rep.detected = True
            rep.coarse_toa = threshold_toa(combined, eta1)
            rep.fo_estimate = 0.0
        reports.append(rep)
    return reports


def write_trace_csv(path, trace):
    import csv

    cols = ["iteration", "cell", "detected", "toa", "peak", "gate", "fo", "h_abs", "noise"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in trace:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
