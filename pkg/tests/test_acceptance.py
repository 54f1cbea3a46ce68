"""Full-scale acceptance criteria. Each test records one PASS/FAIL line that
is repeated in the pytest terminal summary."""

from dataclasses import replace

import numpy as np
import pytest

from nbiot_otdoa import cli
from nbiot_otdoa.airlink import CellLink, noise_variance_for_snr, superpose
from nbiot_otdoa.emsic import BLUE_WEIGHTS, blue_fo, run_stage1
from nbiot_otdoa.harness import (detection_curves, load_spec, run_crlb, run_detection_sweep,
                                 run_positioning, run_toa_error, snr_at, summary_by_variant,
                                 toa_errors)
from nbiot_otdoa.locate import crlb_toa
from nbiot_otdoa.prs import PRS_SYMBOLS, plan_for
from nbiot_otdoa.refine import refine_report, upsample

pytestmark = pytest.mark.acceptance


def preset(name):
    return load_spec(cli.preset_path(name))


# 1 ------------------------------------------------------------- SIC gain


def test_sic_gain_weakest_cell(criterion):
    spec = replace(preset("three_cell_awgn.yaml"), variants=("no-ic", "emsic"))
    assert spec.trials == 500 and spec.detector.iterations == 1
    curves = detection_curves(run_detection_sweep(spec))
    weak = spec.three_cell.weakest
    snr, p_sic = curves[("emsic", weak)]
    _, p_base = curves[("no-ic", weak)]
    s_sic = snr_at(snr, p_sic)
    s_base = snr_at(snr, p_base)
    assert s_sic is not None
    if s_base is None:
        # the baseline never reaches 0.9 on the grid: the gain exceeds the
        # distance from the EM-SIC crossing to one step past the grid end
        gain = snr[-1] + (snr[1] - snr[0]) - s_sic
        detail = (f"gain > {gain:.1f} dB (no-IC never reaches 0.9 within +-2 samples; "
                  f"best {p_base.max():.2f} at {snr[np.argmax(p_base)]:g} dB), "
                  f"EM-SIC 0.9 at {s_sic:.2f} dB")
    else:
        gain = s_base - s_sic
        detail = f"gain {gain:.2f} dB (no-IC {s_base:.2f} dB, EM-SIC {s_sic:.2f} dB)"

    # same comparison with a window wide enough to absorb the early bias of
    # the first-crossing rule; reported, not graded
    wide = replace(spec, window_samples=4.0, trials=200, snr_db=tuple(snr[snr <= 0]))
    wc = detection_curves(run_detection_sweep(wide))
    w_sic = snr_at(*wc[("emsic", weak)])
    w_base = snr_at(*wc[("no-ic", weak)])
    if w_sic is not None and w_base is not None:
        detail += f"; +-4 samples: gain {w_base - w_sic:.2f} dB"
    assert criterion(1, gain >= 5.0, detail)


# 2 ------------------------------------------------------------ FO estimator


def test_fo_estimator(criterion):
    ell = np.asarray(PRS_SYMBOLS)
    worst = 0.0
    for eps in (-0.05, -0.02, 0.0, 0.02, 0.05):
        prof = (0.8 - 0.3j) * np.exp(2j * np.pi * eps * 137 * ell / 128)
        worst = max(worst, abs(blue_fo(prof, PRS_SYMBOLS, 128, 137) - eps))

    plan = plan_for(8)
    nv = noise_variance_for_snr(plan, 0.0)
    clean = superpose([CellLink.from_ts(plan, 16 * 40)], 0.0).samples
    rng = np.random.default_rng(20240605)
    trials = 10_000
    est = np.empty(trials)
    for t in range(trials):
        noise = np.sqrt(nv / 2) * (rng.standard_normal(clean.size)
                                   + 1j * rng.standard_normal(clean.size))
        rep = run_stage1(clean + noise, [plan], 1).reports[0]
        est[t] = rep.fo_estimate if rep.detected else np.nan
    est = est[np.isfinite(est)]
    mean = est.mean()
    half = 1.96 * est.std(ddof=1) / np.sqrt(est.size)
    weights_ok = (np.allclose(BLUE_WEIGHTS, [10 / 21, 13 / 42, 1 / 6, 1 / 21], atol=1e-12)
                  and abs(BLUE_WEIGHTS.sum() - 1.0) <= 5e-4)
    ok = worst <= 1e-4 and abs(mean) <= half and weights_ok
    detail = (f"noiseless worst |err| {worst:.1e}; 0 dB bias {mean:.2e} "
              f"(95% CI +-{half:.2e}, n={est.size}); weights sum {BLUE_WEIGHTS.sum():.6f}")
    assert criterion(2, ok, detail)


# 3 ------------------------------------------------------- interpolation


def _oracle_templates(plan, v=16):
    """Oversampled PRS symbols (CP included) built directly from the plan's
    subcarriers and QPSK values."""
    m, n = plan.symbol_len, plan.fft_size
    t = np.arange(v * m) / v - plan.config.cp_len
    return [(np.exp(2j * np.pi * t[:, None] * plan.freq_index[s] / n) @ plan.freq_symbols[s])
            / np.sqrt(n) for s in range(8)]


def _direct_high_rate(plan, toa_ts, lags_fine, v=16):
    """Oracle: place the symbols at ``toa_ts`` on the 30.72 MHz grid and
    correlate there against the same symbols, scaled by 1/V."""
    tmpl = _oracle_templates(plan, v)
    mh = plan.symbol_len * v
    y_high = np.zeros((14 * plan.symbol_len + 256) * v, dtype=complex)
    for s, ell in enumerate(plan.prs_symbol_indices):
        y_high[ell * mh + toa_ts:ell * mh + toa_ts + mh] += tmpl[s]
    out = np.empty(len(lags_fine), dtype=complex)
    for i, lag in enumerate(lags_fine):
        out[i] = sum(y_high[ell * mh + lag:ell * mh + lag + mh] @ tmpl[s].conj()
                     for s, ell in enumerate(plan.prs_symbol_indices))
    return out / v


def test_interpolation(criterion):
    grid_err = 0.0
    worst = 0.0
    for pci in range(6):
        plan = plan_for(pci)
        for toa in range(640, 656, 3):
            y = superpose([CellLink.from_ts(plan, toa)], 0.0, method="reference")
            rep = run_stage1(y, [plan], 1).reports[0]
            comb = rep.correlation.per_symbol.sum(axis=0)
            win = upsample(comb, rep.coarse_toa)
            idx = np.arange(rep.coarse_toa - 20, rep.coarse_toa + 21)
            grid_err = max(grid_err, float(np.max(np.abs(win.values[::16] - comb[idx]))))
            direct = _direct_high_rate(plan, toa, win.fine_lag(np.arange(win.length)))
            nmse = np.sum(np.abs(win.values - direct) ** 2) / np.sum(np.abs(direct) ** 2)
            worst = max(worst, float(nmse))
    ok = grid_err <= 1e-12 and worst < 1e-3
    detail = f"grid max |err| {grid_err:.1e} (<= 1e-12); worst window NMSE {worst:.2e} (< 1e-3)"
    assert criterion(3, ok, detail)


# 4 ------------------------------------------------------ cancellation


def test_noiseless_cancellation_and_bookkeeping(criterion):
    plan = plan_for(8)
    y = superpose([CellLink.from_ts(plan, 16 * 33, [0.9 - 0.4j])], 0.0)
    res = run_stage1(y, [plan], 2, check_bookkeeping=True)
    ratio = float(np.sum(np.abs(res.state.residual) ** 2) / np.sum(np.abs(y.samples) ** 2))

    spec = preset("three_cell_awgn.yaml")
    tc = spec.three_cell
    plans = tc.plans()
    worst = 0.0
    for t in range(100):
        rng = np.random.default_rng([20240606, t])
        yt = superpose(tc.links(), noise_variance_for_snr(plans[0], rng.uniform(-10, 10)), rng)
        # check_bookkeeping raises on any step whose identity drifts past 1e-10
        out = run_stage1(yt, plans, 2, check_bookkeeping=True)
        worst = max(worst, out.state.bookkeeping_error())
    ok = ratio < 1e-10 and worst < 1e-10
    detail = f"residual/input energy {ratio:.1e} (< 1e-10); 100-trial bookkeeping max {worst:.1e}"
    assert criterion(4, ok, detail)


# 5 ------------------------------------------------------ MPD vs threshold


def test_mpd_vs_threshold(criterion):
    spec = preset("single_cell_awgn.yaml")
    assert spec.trials == 2000 and spec.snr_db == (10.0,)
    errs = toa_errors(run_toa_error(spec))
    med = {v: float(np.median(np.abs(e))) for v, (e, _c) in errs.items()}
    refined, coarse = errs["emsic-foc-up"]
    s_ref, s_coarse = float(refined.std()), float(coarse.std())
    ok = (med["emsic-foc-up"] <= med["emsic-foc-thr"] and med["emsic-foc-up"] <= med["no-ic"]
          and s_ref < s_coarse)
    detail = (f"median |e| MPD {med['emsic-foc-up']:.1f} Ts, threshold on upsampled "
              f"{med['emsic-foc-thr']:.1f} Ts, no-IC threshold {med['no-ic']:.1f} Ts; "
              f"std refined {s_ref:.2f} vs coarse {s_coarse:.2f} Ts")
    assert criterion(5, ok, detail)


# 6 ------------------------------------------------------- positioning


def test_positioning_ordering(criterion):
    parts = []
    ok = True
    for name in ("deployment_awgn.yaml", "deployment_etu.yaml"):
        spec = replace(preset(name), drops=3)
        s = summary_by_variant(run_positioning(spec)["summary"])
        r = [s[v]["ratio"] for v in ("no-ic", "emsic", "emsic-foc")]
        ok &= r[0] <= r[1] <= r[2]
        parts.append(f"{spec.channel}: ratio no-IC {r[0]:.3f} <= EM-SIC {r[1]:.3f} <= "
                     f"+FOC {r[2]:.3f} (+up {s['emsic-foc-up']['ratio']:.3f})")
        if spec.channel == "awgn":
            m_foc, m_up = s["emsic-foc"]["median"], s["emsic-foc-up"]["median"]
            ok &= m_up <= m_foc
            parts.append(f"awgn median error +FOC {m_foc:.1f} m, +up {m_up:.1f} m")
    assert criterion(6, ok, "; ".join(parts))


# 7 --------------------------------------------------------------- CRLB


def _noiseless_slope(plan, lo, hi):
    """d(refined ToA)/d(true ToA) between two delays in one low-rate cell."""
    est = []
    for toa in (lo, hi):
        y = superpose([CellLink.from_ts(plan, toa)], 0.0, method="reference")
        rep = refine_report(run_stage1(y, [plan], 1).reports[0], plan)
        est.append(rep.refined_toa_ts)
    return (est[1] - est[0]) / (hi - lo)


def test_crlb_properties(criterion):
    spec = preset("crlb_awgn.yaml")
    table = run_crlb(spec)
    var = np.array([float(r[4]) for r in table.rows])
    bound = np.array([float(r[5]) for r in table.rows])
    plan = plan_for(spec.single_cell.pci)
    linear = all(crlb_toa(plan, 2.0 * s) == 2.0 * crlb_toa(plan, s) for s in (0.5, 1.0, 3.0))
    ok = bool(np.all(var >= bound) and np.all(np.diff(var) < 0) and linear)
    pairs = ", ".join(f"{r[0]} dB {float(r[4]):.3g}/{float(r[5]):.3g}" for r in table.rows)
    # diagnostic only: the refined ToA responds to the true delay with a
    # slope below one, and a biased estimator is bounded by slope^2 * CRLB
    t0 = spec.single_cell.toa_range_ts[0]
    slope = _noiseless_slope(plan, t0 - 8, t0 + 4)
    ratio = ", ".join(f"{v / (slope ** 2 * b):.2f}" for v, b in zip(var, bound))
    detail = (f"var/bound (samples^2): {pairs}; linear in noise variance {linear}; "
              f"noiseless slope {slope:.2f}, var/(slope^2 bound) {ratio}")
    assert criterion(7, ok, detail)


# 8 ---------------------------------------------------------- determinism


def test_golden_determinism(criterion, tmp_path):
    runs = {
        "sweep-detect": ["--trials", "20"],
        "toa-error": ["--trials", "30"],
        "crlb": ["--trials", "20"],
        "position": ["--trials", "1", "--config", str(tmp_path / "pos.yaml")],
    }
    (tmp_path / "pos.yaml").write_text(
        "experiment: position\nvariants: [no-ic, emsic-foc-up]\ndevices: 6\ndrops: 1\n"
        "seed: 7\nchannel: etu\n")
    same = True
    names = []
    for cmd, extra in runs.items():
        texts = []
        for tag, workers in (("a", "1"), ("b", "1"), ("c", "2")):
            out = tmp_path / f"{cmd}-{tag}"
            assert cli.main([cmd, "--seed", "11", "--workers", workers, "--out", str(out)]
                            + extra) == 0
            texts.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
        same &= texts[0] == texts[1] == texts[2]
        names.extend(sorted(texts[0]))
    assert criterion(8, same, f"{len(names)} CSV files byte-identical over 2 runs and "
                              f"1 vs 2 workers")
