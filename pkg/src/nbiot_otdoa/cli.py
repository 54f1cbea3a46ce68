"""Command-line entry point ``nbiot-otdoa``.

Experiment subcommands read a YAML preset (``--config``; a packaged default
otherwise), apply ``--seed``/``--trials``/``--variant`` overrides and write
CSV files into ``--out``. Only configuration problems produce a nonzero exit
status.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace
from importlib import resources

import numpy as np

from . import __version__
from .airlink import noise_variance_for_snr, read_iq, superpose, write_iq
from .correlate import n_lags_for, write_profile_csv
from .emsic import run_stage1, write_trace_csv
from .harness import (ALL_VARIANTS, ConfigError, DetectorConfig, detect, detection_curves,
                      load_spec, report_toa_ts, run_crlb, run_detection_sweep,
                      run_positioning, run_toa_error, snr_at, summary_by_variant, toa_errors,
                      toa_histogram, with_overrides)
from .prs import FS_LOW, plan_for
from .refine import refined_window, write_window_csv

DEFAULT_PRESETS = {
    "sweep-detect": "three_cell_awgn.yaml",
    "toa-error": "single_cell_awgn.yaml",
    "position": "deployment_awgn.yaml",
    "crlb": "crlb_awgn.yaml",
}

EXIT_CONFIG = 2


def preset_path(name: str) -> str:
    return str(resources.files("nbiot_otdoa").joinpath("presets", name))


def _variants(values):
    if not values:
        return None
    out = []
    for v in values:
        out.extend(x for x in v.split(",") if x)
    bad = [v for v in out if v not in ALL_VARIANTS]
    if bad:
        raise ConfigError(f"unknown variant(s) {bad}; choose from {', '.join(ALL_VARIANTS)}")
    return tuple(out)


def _resolve_spec(args):
    path = args.config or preset_path(DEFAULT_PRESETS[args.command])
    spec = load_spec(path)
    if spec.experiment != args.command:
        raise ConfigError(f"config is for {spec.experiment!r}, not {args.command!r}")
    # positioning counts devices per drop rather than trials
    counts = ({"devices": args.trials} if args.command == "position"
              else {"trials": args.trials})
    return with_overrides(spec, seed=args.seed, variants=_variants(args.variant), **counts)


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _cmd_sweep(args):
    spec = _resolve_spec(args)
    table = run_detection_sweep(spec, args.workers)
    out = _out_dir(args.out)
    table.write(os.path.join(out, "detection.csv"))
    curves = detection_curves(table)
    for (variant, cell), (snr, p) in sorted(curves.items()):
        s90 = snr_at(snr, p)
        txt = "not reached" if s90 is None else f"{s90:.2f} dB"
        print(f"{variant:14s} cell {cell} (pci {spec.three_cell.pcis[cell]}): "
              f"SNR at 90% detection {txt}")
    return 0


def _cmd_toa(args):
    spec = _resolve_spec(args)
    out = _out_dir(args.out)
    table = run_toa_error(spec, workers=args.workers)
    table.write(os.path.join(out, "toa_errors.csv"))
    toa_histogram(spec, table).write(os.path.join(out, "toa_histogram.csv"))
    for variant, (err, _coarse) in toa_errors(table).items():
        if err.size == 0:
            print(f"{variant:14s} no detections")
            continue
        q1, q3 = np.percentile(err, [25, 75])
        print(f"{variant:14s} n={err.size} median|e|={np.median(np.abs(err)):.2f} Ts "
              f"mean={err.mean():.2f} std={err.std():.2f} IQR={q3 - q1:.2f}")
    return 0


def _cmd_position(args):
    spec = _resolve_spec(args)
    out = _out_dir(args.out)
    tables = run_positioning(spec, args.workers)
    for name, table in tables.items():
        fname = "position_summary.csv" if name == "summary" else f"fixes_{name}.csv"
        table.write(os.path.join(out, fname))
    for variant, s in summary_by_variant(tables["summary"]).items():
        print(f"{variant:14s} localized {s['ratio']:.3f}  median error {s['median']:.1f} m")
    return 0


def _cmd_crlb(args):
    spec = _resolve_spec(args)
    out = _out_dir(args.out)
    table = run_crlb(spec, args.workers)
    table.write(os.path.join(out, "crlb.csv"))
    for row in table.rows:
        print(f"SNR {row[0]:>4s} dB  var {float(row[4]):.3e}  CRLB {float(row[5]):.3e} samples^2")
    return 0


def _cmd_replay(args):
    spec = load_spec(args.config) if args.config else None
    try:
        signal, header = read_iq(args.iq)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read IQ file: {exc}") from None
    if signal.rate_hz != FS_LOW:
        raise ConfigError(f"IQ rate {signal.rate_hz} Hz, expected {FS_LOW}")
    pcis = args.pci or header.get("pcis")
    if not pcis:
        raise ConfigError("no PCIs given (use --pci or a header 'pcis' entry)")
    variants = _variants(args.variant) or ("emsic-foc-up",)
    det = spec.detector if spec is not None else DetectorConfig()
    plans = [plan_for(int(p)) for p in pcis]
    try:
        n_lags = n_lags_for(signal.samples, plans[0])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    det = replace(det, n_lags=n_lags)
    out = _out_dir(args.out)

    stage1 = run_stage1(signal, plans, det.iterations, det.eta1, det.eta2,
                        gate_form=det.gate_form, n_lags=n_lags)
    write_trace_csv(os.path.join(out, "trace.csv"), stage1.trace)
    for rep, plan in zip(stage1.reports, plans):
        write_profile_csv(os.path.join(out, f"profile_pci{plan.pci}.csv"),
                          rep.correlation.combined)
        if rep.detected:
            write_window_csv(os.path.join(out, f"window_pci{plan.pci}.csv"),
                             refined_window(rep, plan, det.half_window))

    with open(os.path.join(out, "reports.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "pci", "detected", "coarse_toa", "toa_ts", "fo", "h_abs"])
        for variant in variants:
            for rep in detect(signal, plans, variant, det):
                toa = f"{report_toa_ts(rep):.3f}" if rep.detected else ""
                h = "" if rep.lmmse_channel is None else f"{abs(rep.lmmse_channel):.6g}"
                fo = "" if rep.fo_estimate is None else f"{rep.fo_estimate:.6g}"
                w.writerow([variant, rep.cell_id, int(rep.detected),
                            "" if rep.coarse_toa is None else rep.coarse_toa, toa, fo, h])
                print(f"{variant:14s} pci {rep.cell_id:3d} detected={int(rep.detected)} "
                      f"toa_ts={toa or '-'}")
    return 0


def _cmd_synth(args):
    """Write one received subframe of a preset as an IQ dump."""
    spec = load_spec(args.config or preset_path(DEFAULT_PRESETS["sweep-detect"]))
    rng = np.random.default_rng(spec.seed if args.seed is None else args.seed)
    snr = spec.snr_db[0] if args.snr is None else args.snr
    if spec.scenario == "three-cell":
        links = spec.three_cell.links()
    elif spec.scenario == "single-cell":
        links = [spec.single_cell.draw(rng)]
    else:
        raise ConfigError("synth supports the three-cell and single-cell scenarios")
    nv = noise_variance_for_snr(links[0].plan, snr)
    y = superpose(links, nv, rng, spec.detector.n_lags, spec.synthesis)
    meta = {"pcis": [lk.plan.pci for lk in links], "snr_db": snr,
            "toas_ts": [lk.first_toa_ts for lk in links]}
    write_iq(args.out, y, meta)
    print(f"wrote {len(y)} samples to {args.out}")
    return 0


def _cmd_plan(args):
    text = plan_for(args.pci).dumps()
    if args.out == "-":
        sys.stdout.write(text + "\n")
    else:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nbiot-otdoa",
                                description="NB-IoT OTDOA link-level simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="results"):
        sp.add_argument("--config", help="YAML preset file")
        sp.add_argument("--seed", type=int, help="override the preset seed")
        sp.add_argument("--trials", type=int,
                        help="override the trial count (devices per drop for position)")
        sp.add_argument("--variant", action="append",
                        help=f"detector variant(s), comma separated: {', '.join(ALL_VARIANTS)}")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--workers", type=int, default=1, help="worker processes")

    for name, fn, helptext in (
            ("sweep-detect", _cmd_sweep, "detection probability versus SNR, 3 cells"),
            ("toa-error", _cmd_toa, "ToA error statistics, single active cell"),
            ("position", _cmd_position, "positioning in the hexagonal deployment"),
            ("crlb", _cmd_crlb, "refined-ToA variance against the CRLB")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("replay", help="run the detector on an IQ dump")
    sp.add_argument("iq", help="IQ file (JSON header line + cf32le samples)")
    sp.add_argument("--pci", type=int, action="append", help="cell(s) to search for")
    common(sp, out_default="replay")
    sp.set_defaults(func=_cmd_replay)

    sp = sub.add_parser("synth", help="write one received subframe as an IQ dump")
    sp.add_argument("--config", help="YAML preset (three-cell or single-cell)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--snr", type=float, help="SNR in dB (default: first preset point)")
    sp.add_argument("--out", required=True, help="IQ output file")
    sp.set_defaults(func=_cmd_synth)

    sp = sub.add_parser("plan", help="dump a cell's PRS plan as JSON")
    sp.add_argument("--pci", type=int, required=True)
    sp.add_argument("--out", default="-")
    sp.set_defaults(func=_cmd_plan)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", 1) is not None and getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "trials", None) is not None and args.trials < 1:
        print("error: --trials must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
