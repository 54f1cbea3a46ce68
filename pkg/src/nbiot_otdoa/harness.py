"""Monte Carlo engine: detection sweeps, ToA error statistics, positioning
runs and the estimator-variance check against the CRLB.

Every trial derives its own random stream from ``(seed, experiment, point,
trial)`` so results do not depend on how trials are spread over workers.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from .airlink import superpose, noise_variance_for_snr
from .correlate import ETA1, ETA2
from .emsic import detect_no_ic, run_stage1
from .locate import MIN_CELLS, SUCCESS_RADIUS_M, crlb_toa, locate_reports, fix_row, FIX_COLUMNS
from .prs import UPSAMPLE, plan_for
from .refine import GAMMA, HALF_WINDOW, MAX_PATHS, refine_report
from .scenario import (FO_RANGE, Deployment, SingleCellPreset, ThreeCellPreset,
                       device_links, drop_devices)

VARIANTS = ("no-ic", "emsic", "emsic-foc", "emsic-foc-up")
EXTRA_VARIANTS = ("emsic-foc-thr",)
ALL_VARIANTS = VARIANTS + EXTRA_VARIANTS

_EXPERIMENT_KEYS = {"sweep-detect": 1, "toa-error": 2, "position": 3, "crlb": 4}
_SCENARIO_FOR = {"sweep-detect": "three-cell", "toa-error": "single-cell",
                 "position": "deployment", "crlb": "single-cell"}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class DetectorConfig:
    eta1: float = ETA1
    eta2: float = ETA2
    gamma: float = GAMMA
    iterations: int = 2
    n_lags: int = 128
    gate_form: str = "coherent"
    half_window: int = HALF_WINDOW
    max_paths: int = MAX_PATHS
    par_reference: str = "initial"
    check_bookkeeping: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("detector.iterations must be >= 1")
        if self.n_lags < 1:
            raise ConfigError("detector.n_lags must be >= 1")
        if self.gate_form not in ("coherent", "literal"):
            raise ConfigError(f"unknown gate_form {self.gate_form!r}")
        if self.par_reference not in ("initial", "current"):
            raise ConfigError(f"unknown par_reference {self.par_reference!r}")
        if not 0 < self.eta1 <= 1:
            raise ConfigError("detector.eta1 must lie in (0, 1]")


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: str = "sweep-detect"
    scenario: str | None = None
    channel: str = "awgn"
    variants: tuple = ("no-ic", "emsic")
    snr_db: tuple = tuple(range(-16, 22, 2))
    trials: int = 500
    devices: int = 200
    drops: int = 5
    seed: int = 1
    window_samples: float = 2.0
    synthesis: str = "fast"
    hist_bin_ts: float = 4.0
    hist_range_ts: float = 160.0
    fo_range: float = FO_RANGE
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    three_cell: ThreeCellPreset = field(default_factory=ThreeCellPreset)
    single_cell: SingleCellPreset = field(default_factory=SingleCellPreset)
    deployment: Deployment = field(default_factory=Deployment)

    def __post_init__(self):
        if self.experiment not in _EXPERIMENT_KEYS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.scenario is None:
            object.__setattr__(self, "scenario", _SCENARIO_FOR[self.experiment])
        if self.scenario not in ("three-cell", "single-cell", "deployment"):
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.channel not in ("awgn", "etu"):
            raise ConfigError(f"unknown channel {self.channel!r}")
        if self.synthesis not in ("fast", "reference"):
            raise ConfigError(f"unknown synthesis {self.synthesis!r}")
        bad = [v for v in self.variants if v not in ALL_VARIANTS]
        if bad or not self.variants:
            raise ConfigError(f"unknown variants {bad}; choose from {ALL_VARIANTS}")
        if self.trials < 1 or self.devices < 1 or self.drops < 1:
            raise ConfigError("trials, devices and drops must be >= 1")
        if self.window_samples < 0:
            raise ConfigError("window_samples must be >= 0")
        need = _SCENARIO_FOR[self.experiment]
        if self.scenario != need:
            raise ConfigError(f"{self.experiment} runs on the {need} scenario, "
                              f"config has {self.scenario!r}")
        if not self.snr_db:
            raise ConfigError("snr_db must list at least one point")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deployment"]["site_xy"] = [list(p) for p in self.deployment.site_xy]
        return d

    def header_lines(self) -> list[str]:
        return [f"nbiot-otdoa {__version__}",
                "spec " + json.dumps(self.to_dict(), sort_keys=True, default=list),
                f"seed {self.seed}"]


# ---------------------------------------------------------------- detection


def detect(y, plans, variant: str, det: DetectorConfig):
    """Run one detector variant on a received subframe; returns CellReports."""
    if variant == "no-ic":
        return detect_no_ic(y, plans, det.eta1, det.eta2, det.gate_form, det.n_lags)
    res = run_stage1(y, plans, det.iterations, det.eta1, det.eta2, use_sic=True,
                     use_foc=variant != "emsic", gate_form=det.gate_form, n_lags=det.n_lags,
                     check_bookkeeping=det.check_bookkeeping)
    if variant in ("emsic-foc-up", "emsic-foc-thr"):
        method = "mpd" if variant == "emsic-foc-up" else "threshold"
        for rep, plan in zip(res.reports, plans):
            refine_report(rep, plan, det.half_window, UPSAMPLE, det.gamma, det.max_paths,
                          par_reference=det.par_reference, method=method, eta1=det.eta1)
    return res.reports


def report_toa_ts(rep) -> float:
    """Estimated ToA in Ts: refined when available, else coarse times 16."""
    if rep.refined_toa_ts is not None:
        return float(rep.refined_toa_ts)
    return float(rep.coarse_toa) * UPSAMPLE


def _rng(spec: ExperimentSpec, point: int, trial: int) -> np.random.Generator:
    ss = np.random.SeedSequence(spec.seed, spawn_key=(_EXPERIMENT_KEYS[spec.experiment],
                                                      point, trial))
    return np.random.default_rng(ss)


def _map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) < 2:
        return [fn(t) for t in tasks]
    chunk = max(1, len(tasks) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks, chunksize=chunk))


def _csv_text(header_lines, columns, rows) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


@dataclass
class Table:
    name: str
    columns: list
    rows: list
    header: list = field(default_factory=list)

    def to_csv(self) -> str:
        return _csv_text(self.header, self.columns, self.rows)

    def write(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


# ----------------------------------------------------------- detection sweep


def _sweep_trial(args):
    spec, point, trial = args
    rng = _rng(spec, point, trial)
    preset = spec.three_cell
    plans = preset.plans()
    nv = noise_variance_for_snr(plans[0], spec.snr_db[point])
    y = superpose(preset.links(), nv, rng, spec.detector.n_lags, spec.synthesis)
    out = []
    for variant in spec.variants:
        reps = detect(y, plans, variant, spec.detector)
        hits = []
        for rep, truth in zip(reps, preset.toas_ts):
            ok = rep.detected and abs(report_toa_ts(rep) - truth) <= spec.window_samples * UPSAMPLE
            hits.append(bool(ok))
        out.append(hits)
    return out


def run_detection_sweep(spec: ExperimentSpec, workers: int = 1) -> Table:
    """Per SNR point, variant and cell: fraction of trials detected within
    ``window_samples`` low-rate samples of the true ToA."""
    tasks = [(spec, p, t) for p in range(len(spec.snr_db)) for t in range(spec.trials)]
    res = _map(_sweep_trial, tasks, workers)
    hits = np.array(res, dtype=bool).reshape(len(spec.snr_db), spec.trials,
                                             len(spec.variants), -1)
    rows = []
    for p, snr in enumerate(spec.snr_db):
        for v, variant in enumerate(spec.variants):
            for c, pci in enumerate(spec.three_cell.pcis):
                n = int(hits[p, :, v, c].sum())
                rows.append([f"{snr:g}", variant, c, pci, spec.trials, n,
                             f"{n / spec.trials:.6f}"])
    cols = ["snr_db", "variant", "cell", "pci", "trials", "detected", "p_detect"]
    return Table("detection", cols, rows, spec.header_lines())


def detection_curves(table: Table) -> dict:
    """{(variant, cell): (snr array, p_detect array)} from a sweep table."""
    out: dict = {}
    for snr, variant, cell, _pci, _n, _k, p in table.rows:
        out.setdefault((variant, int(cell)), ([], []))
        out[(variant, int(cell))][0].append(float(snr))
        out[(variant, int(cell))][1].append(float(p))
    return {k: (np.array(s), np.array(p)) for k, (s, p) in out.items()}


def snr_at(snr, p, target: float = 0.9):
    """Lowest SNR where the detection curve reaches ``target``, linearly
    interpolated between grid points. ``None`` if it never does."""
    snr = np.asarray(snr, dtype=float)
    p = np.asarray(p, dtype=float)
    idx = np.flatnonzero(p >= target)
    if idx.size == 0:
        return None
    i = int(idx[0])
    if i == 0:
        return float(snr[0])
    s0, s1, p0, p1 = snr[i - 1], snr[i], p[i - 1], p[i]
    return float(s0 + (target - p0) * (s1 - s0) / (p1 - p0))


# ------------------------------------------------------------------ ToA error


def _toa_trial(args):
    spec, point, trial, snr_db = args
    rng = _rng(spec, point, trial)
    preset = spec.single_cell
    link = preset.draw(rng)
    plans = [link.plan]
    nv = noise_variance_for_snr(link.plan, snr_db)
    y = superpose([link], nv, rng, spec.detector.n_lags, spec.synthesis)
    truth = link.first_toa_ts
    out = []
    for variant in spec.variants:
        rep = detect(y, plans, variant, spec.detector)[0]
        if rep.detected:
            out.append((True, truth, report_toa_ts(rep), float(rep.coarse_toa) * UPSAMPLE))
        else:
            out.append((False, truth, float("nan"), float("nan")))
    return out


def run_toa_error(spec: ExperimentSpec, snr_db: float | None = None, workers: int = 1,
                  point: int = 0) -> Table:
    """Per-trial ToA errors (true minus estimated, Ts) for each variant."""
    snr = spec.snr_db[0] if snr_db is None else snr_db
    tasks = [(spec, point, t, snr) for t in range(spec.trials)]
    res = _map(_toa_trial, tasks, workers)
    rows = []
    for t, per_variant in enumerate(res):
        for variant, (det, truth, est, coarse) in zip(spec.variants, per_variant):
            err = truth - est
            rows.append([t, f"{snr:g}", variant, int(det), f"{truth:.3f}", f"{est:.3f}",
                         f"{coarse:.3f}", f"{err:.3f}"])
    cols = ["trial", "snr_db", "variant", "detected", "true_ts", "est_ts", "coarse_ts",
            "error_ts"]
    return Table("toa_errors", cols, rows, spec.header_lines())


def toa_errors(table: Table) -> dict:
    """{variant: (errors, coarse errors)} over detected trials."""
    out: dict = {}
    for _t, _snr, variant, det, truth, _est, coarse, err in table.rows:
        e, c = out.setdefault(variant, ([], []))
        if int(det):
            e.append(float(err))
            c.append(float(truth) - float(coarse))
    return {k: (np.array(e), np.array(c)) for k, (e, c) in out.items()}


def toa_histogram(spec: ExperimentSpec, table: Table) -> Table:
    edges = np.arange(-spec.hist_range_ts, spec.hist_range_ts + spec.hist_bin_ts / 2,
                      spec.hist_bin_ts)
    rows = []
    for variant, (err, _c) in toa_errors(table).items():
        counts, _ = np.histogram(np.clip(err, edges[0], edges[-1]), edges)
        for lo, hi, n in zip(edges[:-1], edges[1:], counts):
            rows.append([variant, f"{lo:g}", f"{hi:g}", int(n)])
    return Table("toa_histogram", ["variant", "bin_lo_ts", "bin_hi_ts", "count"], rows,
                 spec.header_lines())


# ---------------------------------------------------------------- positioning


def _position_trial(args):
    spec, drop, dev, xy, sh = args
    rng = _rng(spec, drop, dev)
    dep = spec.deployment
    links = device_links(dep, xy, sh, spec.channel, rng, spec.fo_range)
    plans = [lk.plan for lk in links]
    nv = noise_variance_for_snr(plans[0], 0.0)
    y = superpose(links, nv, rng, spec.detector.n_lags, spec.synthesis)
    coords = dep.cell_coords()
    bounds = dep.bounds()
    out = []
    for variant in spec.variants:
        reps = detect(y, plans, variant, spec.detector)
        fix = locate_reports(reps, coords, bounds).score(xy)
        out.append((fix_row(0, fix)[1:], fix.success()))
    return out


def run_positioning(spec: ExperimentSpec, workers: int = 1) -> dict[str, Table]:
    """Per-variant fix tables plus a summary table keyed ``"summary"``."""
    tasks = []
    for drop in range(spec.drops):
        ss = np.random.SeedSequence(spec.seed, spawn_key=(_EXPERIMENT_KEYS["position"],
                                                          10_000 + drop))
        dd = drop_devices(spec.deployment, spec.devices, np.random.default_rng(ss))
        for dev in range(spec.devices):
            tasks.append((spec, drop, dev, dd.xy[dev], dd.shadowing_db[dev]))
    res = _map(_position_trial, tasks, workers)
    tables = {}
    summary = []
    for v, variant in enumerate(spec.variants):
        rows = []
        errs, ok = [], []
        for trial, per_variant in enumerate(res):
            row, success = per_variant[v]
            rows.append([trial] + row)
            ok.append(success)
            if success:
                errs.append(float(row[2]))
        tables[variant] = Table(f"fixes_{variant}", ["variant"] + FIX_COLUMNS,
                                [[variant] + r for r in rows], spec.header_lines())
        errs = np.array(errs)
        n = len(rows)
        ratio = float(np.mean(ok))
        q = (np.percentile(errs, [50, 67, 90]) if errs.size else [float("nan")] * 3)
        summary.append([variant, spec.channel, n, int(np.sum(ok)), f"{ratio:.6f}",
                        f"{q[0]:.3f}", f"{q[1]:.3f}", f"{q[2]:.3f}"])
    tables["summary"] = Table("position_summary",
                              ["variant", "channel", "devices", "localized",
                               "localization_ratio", "median_error_m", "p67_error_m",
                               "p90_error_m"], summary, spec.header_lines())
    return tables


def summary_by_variant(table: Table) -> dict:
    return {r[0]: {"ratio": float(r[4]), "median": float(r[5]), "localized": int(r[3])}
            for r in table.rows}


# ----------------------------------------------------------------------- CRLB


def _crlb_trial(args):
    spec, point, trial, snr_db = args
    rng = _rng(spec, point, trial)
    link = spec.single_cell.draw(rng)
    nv = noise_variance_for_snr(link.plan, snr_db)
    y = superpose([link], nv, rng, spec.detector.n_lags, spec.synthesis)
    rep = detect(y, [link.plan], "emsic-foc-up", spec.detector)[0]
    if not rep.detected:
        return None
    return report_toa_ts(rep) - link.first_toa_ts


def run_crlb(spec: ExperimentSpec, workers: int = 1) -> Table:
    """Refined-ToA variance against the bound, both in low-rate samples^2."""
    plan = plan_for(spec.single_cell.pci)
    rows = []
    for p, snr in enumerate(spec.snr_db):
        tasks = [(spec, p, t, snr) for t in range(spec.trials)]
        res = [r for r in _map(_crlb_trial, tasks, workers) if r is not None]
        err = np.array(res, dtype=float) / UPSAMPLE
        nv = noise_variance_for_snr(plan, snr)
        bound = crlb_toa(plan, nv)
        printed = crlb_toa(plan, nv, "printed")
        var = float(err.var(ddof=1)) if err.size > 1 else float("nan")
        mean = float(err.mean()) if err.size else float("nan")
        rows.append([f"{snr:g}", f"{nv:.9g}", err.size, f"{mean:.6f}", f"{var:.9g}",
                     f"{bound:.9g}", f"{printed:.9g}"])
    cols = ["snr_db", "noise_variance", "detected", "mean_error_samples", "var_samples2",
            "crlb_samples2", "crlb_printed_samples2"]
    return Table("crlb", cols, rows, spec.header_lines())


# --------------------------------------------------------------- spec loading


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()}
    if cls is Deployment and "site_xy" in kw:
        kw["site_xy"] = tuple(tuple(float(c) for c in p) for p in kw["site_xy"])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _snr_grid(value):
    if isinstance(value, dict):
        try:
            start, stop, step = float(value["start"]), float(value["stop"]), float(value["step"])
        except KeyError as exc:
            raise ConfigError(f"snr_db range needs start/stop/step, missing {exc}") from None
        if step <= 0 or stop < start:
            raise ConfigError("snr_db range must have step > 0 and stop >= start")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return tuple(float(start + i * step) for i in range(n))
    if isinstance(value, (int, float)):
        return (float(value),)
    return tuple(float(v) for v in value)


def spec_from_dict(data: dict) -> ExperimentSpec:
    """Build an :class:`ExperimentSpec` from a preset mapping."""
    if not isinstance(data, dict):
        raise ConfigError("preset must be a mapping")
    data = dict(data)
    nested = {"detector": DetectorConfig, "three_cell": ThreeCellPreset,
              "single_cell": SingleCellPreset, "deployment": Deployment}
    kw = {}
    for key, cls in nested.items():
        if key in data:
            kw[key] = _build(cls, data.pop(key), key)
    if "snr_db" in data:
        kw["snr_db"] = _snr_grid(data.pop("snr_db"))
    known = {f.name for f in fields(ExperimentSpec)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown preset keys: {sorted(unknown)}")
    for k, v in data.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    try:
        return ExperimentSpec(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_spec(path) -> ExperimentSpec:
    import yaml

    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return spec_from_dict(data or {})


def with_overrides(spec: ExperimentSpec, **kw) -> ExperimentSpec:
    kw = {k: v for k, v in kw.items() if v is not None}
    try:
        return replace(spec, **kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


__all__ = ["ALL_VARIANTS", "ConfigError", "DetectorConfig", "ExperimentSpec", "MIN_CELLS",
           "SUCCESS_RADIUS_M", "Table", "VARIANTS", "detect", "detection_curves",
           "load_spec", "run_crlb", "run_detection_sweep", "run_positioning", "run_toa_error",
           "snr_at", "spec_from_dict", "summary_by_variant", "toa_errors", "toa_histogram",
           "with_overrides"]
