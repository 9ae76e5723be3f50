"""Command-line experiment runner.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 statistical-quality failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from chargenoise import __version__, io
from chargenoise import pipeline as pl
from chargenoise.config import ExperimentConfig, config_to_dict, dump_config, fingerprint, load_config
from chargenoise.errors import (
    BelowSensitivityError,
    ConfigError,
    DataFormatError,
    DegradedDataError,
    ExtrapolationError,
    FingerprintMismatchError,
    FitError,
    GridMismatchError,
)
from chargenoise.stats import AnalysisSettings, cross_correlation, infer_density

log = logging.getLogger("chargenoise")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_QUALITY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# Manifest

class Manifest:
    def __init__(self, command: str, cfg: ExperimentConfig, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.files: list[Path] = []
        self.seeds: dict = {"master": cfg.seed}
        self.extra: dict = {}
        self.start = time.time()

    def add(self, path: Path) -> Path:
        self.files.append(Path(path))
        return path

    def write(self) -> Path:
        end = time.time()
        files = []
        for p in sorted(set(self.files)):
            files.append({"path": str(p.relative_to(self.out)) if p.is_relative_to(self.out) else str(p),
                          "sha256": io.sha256_file(p), "bytes": p.stat().st_size})
        doc = {
            "command": self.command,
            "config_hash": self.cfg.fingerprint(),
            "analysis_fingerprint": self.cfg.analysis_fingerprint(),
            "seeds": self.seeds,
            "files": files,
            "versions": {"chargenoise": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "wall_clock": {"start": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(self.start)),
                           "elapsed_s": round(end - self.start, 3)},
        }
        doc.update(self.extra)
        path = self.out / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header(cfg: ExperimentConfig, **extra) -> dict:
    h = {"config_hash": cfg.fingerprint(), "units": "SI (s, Hz, m, V/m)"}
    h.update(extra)
    return h


def _jobs(args) -> int:
    return pl.default_jobs() if args.jobs is None else max(1, args.jobs)


# --------------------------------------------------------------------------
# Commands

def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg)
    man = Manifest("simulate", cfg, out)
    camp = pl.run_campaign(cfg)
    man.seeds.update(camp.seeds)
    sweep_dict = config_to_dict(cfg)["sweep"]
    (out / "config.yaml").write_text(dump_config(cfg))
    man.add(out / "config.yaml")
    man.add(io.write_event_trace(out / "events.txt", camp.trace,
                                 _header(cfg, n_charges=len(camp.ensemble), warmup_s=camp.t0)))
    anchors = camp.ensemble.anchors
    man.add(io.write_table(out / "charges.txt", {"x": anchors[:, 0], "y": anchors[:, 1], "z": anchors[:, 2],
                                                 "q": camp.ensemble.q}, _header(cfg), kind="charges"))
    for batch in camp.batches:
        man.add(io.write_sweeps(out / f"sweeps_{batch.probe_name}.txt", batch,
                                _header(cfg, sweep=sweep_dict, voltage_V=cfg.voltage)))
    man.write()
    print(f"simulated {len(camp.trace)} events, {cfg.sweep.n_sweeps} sweeps x {len(camp.batches)} probe(s) -> {out}")
    return EXIT_OK


def _sweep_files(args, cfg) -> list[Path]:
    if args.inputs:
        return [Path(p) for p in args.inputs]
    files = sorted(Path(cfg.output_dir).glob("sweeps_*.txt"))
    if not files:
        raise DataFormatError(cfg.output_dir, None, "no sweeps_*.txt files found")
    return files


def _data_fingerprint(sweep_header: dict, analysis: AnalysisSettings, cfg: ExperimentConfig) -> str:
    d = config_to_dict(replace(cfg, analysis=analysis))
    sweep = sweep_header.get("sweep", d["sweep"])
    return fingerprint({"sweep": sweep, "analysis": d["analysis"]})


def cmd_analyze(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg)
    man = Manifest("analyze", cfg, out)
    files = _sweep_files(args, cfg)
    traces, rows, degraded = [], [], []
    for path in files:
        tab_header = io.read_table_header(path)
        batch = io.read_sweeps(path)
        trace = pl.fit_batch(batch)
        fp = _data_fingerprint(tab_header, cfg.analysis, cfg)
        trace.meta.update({"source": path.name, "analysis_fingerprint": fp})
        name = batch.probe_name
        man.add(io.write_frequency_trace(out / f"trace_{name}.txt", trace, _header(cfg)))
        traces.append(trace)
        try:
            pl.check_quality(trace)
        except DegradedDataError as exc:
            degraded.append(f"{path}: {exc}")
            continue
        s = pl.summarize(trace, cfg.analysis)
        if s.autocorrelation is not None:
            man.add(io.write_correlation(out / f"autocorr_{name}.txt", s.autocorrelation,
                                         _header(cfg, probe=name, tau_s=s.tau, tau_err_s=s.tau_err)))
        if s.histogram is not None:
            man.add(io.write_step_histogram(out / f"steps_{name}.txt", s.histogram, s.gaussian, s.ratio,
                                            _header(cfg, probe=name, eta=s.eta, analysis_fingerprint=fp)))
        rows.append({"probe": name, **s.row()})
    for i in range(1, len(traces)):
        try:
            curve = cross_correlation(traces[0], traces[i], settings=cfg.analysis)
        except GridMismatchError as exc:
            log.warning("cross-correlation skipped: %s", exc)
            continue
        a, b = traces[0].meta["probe"], traces[i].meta["probe"]
        man.add(io.write_correlation(out / f"xcorr_{a}_{b}.txt", curve, _header(cfg, peak=curve.peak(0))))
    if rows:
        cols = {k: np.array([r[k] for r in rows], dtype=object if k == "probe" else None) for k in rows[0]}
        man.add(io.write_table(out / "summary.txt", cols, _header(cfg), kind="summary"))
        for r in rows:
            print(f"{r['probe']}: sigma_f = {r['sigma_f_Hz'] / 1e6:.2f} MHz, tau = {r['tau_s']:.4g} s, "
                  f"eta = {r['eta']:.3f} ({r['n_ok']}/{r['n_sweeps']} sweeps ok)")
    man.write()
    if degraded:
        for msg in degraded:
            print(msg, file=sys.stderr)
        return EXIT_QUALITY
    return EXIT_OK


def cmd_sweep_power(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg)
    man = Manifest("sweep-power", cfg, out)
    res = pl.power_sweep(cfg, args.powers, jobs=_jobs(args))
    cols = {"guided_flux_photons_per_s": res.guided_flux, "tau_s": res.tau, "tau_err_s": res.tau_err,
            "sigma_f_Hz": res.sigma_f, "n_ok": res.n_ok}
    header = _header(cfg, slope=res.slope, slope_err=res.slope_err, nan_ok=["tau_s", "tau_err_s"])
    man.add(io.write_table(out / "power_sweep.txt", cols, header, kind="power_sweep"))
    man.write()
    for row in zip(res.guided_flux, res.tau, res.sigma_f):
        print(f"P = {row[0]:.3g} photons/s: tau = {row[1]:.4g} s, sigma_f = {row[2] / 1e6:.2f} MHz")
    if np.isfinite(res.slope):
        print(f"log-log slope of tau(P): {res.slope:.3f} +/- {res.slope_err:.3f}")
    return EXIT_OK


def cmd_scan_focus(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg)
    man = Manifest("scan-focus", cfg, out)
    res = pl.focus_scan(cfg, args.positions, jobs=_jobs(args))
    cols = {"position_m": res.positions, "tau_s": res.tau, "rate_normalized": res.rate_norm}
    header = _header(cfg, tau_ref_s=res.tau_ref, fwhm_m=res.fwhm,
                     gaussian_fit={k: float(v) for k, v in res.fit.params.items()})
    man.add(io.write_table(out / "focus_scan.txt", cols, header, kind="focus_scan"))
    man.write()
    print(f"focus profile FWHM = {res.fwhm * 1e6:.3f} um, peak normalized rate = {res.peak_rate:.3f}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg)
    path = out / "calibration.txt"
    ccfg = pl.calibration_config(cfg)
    if path.exists() and not args.force:
        try:
            cached = io.read_calibration(path, ccfg.analysis_fingerprint())
            if cached.config_fingerprint == ccfg.fingerprint():
                print(f"reusing cached calibration {path}")
                return EXIT_OK
        except (FingerprintMismatchError, DataFormatError):
            pass
    man = Manifest("calibrate", cfg, out)
    cal = pl.eta_calibration(cfg, jobs=_jobs(args))
    man.add(io.write_calibration(path, cal, _header(cfg)))
    man.write()
    for n, e, s in zip(cal.n_q, cal.eta, cal.eta_std):
        print(f"n_q = {n:.3g} m^-3: eta = {e:.3f} +/- {s:.3f}")
    print(f"baseline eta (no charges) = {cal.baseline:.3f}; monotone decreasing: {cal.monotone}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _config(args)
    cal_path = Path(args.calibration) if args.calibration else Path(cfg.output_dir) / "calibration.txt"
    if args.eta is not None:
        cal = io.read_calibration(cal_path)
        eta = args.eta
    else:
        if not args.trace:
            raise UsageError("infer needs --eta or --trace")
        trace = io.read_frequency_trace(args.trace)
        fp = trace.meta.get("analysis_fingerprint")
        if fp is None:
            raise FingerprintMismatchError(f"{args.trace}: trace carries no analysis fingerprint")
        cal = io.read_calibration(cal_path, fp)
        pl.check_quality(trace)
        eta = pl.summarize(trace, cfg.analysis, tau=False, eta=True).eta
    est = infer_density(eta, cal)
    print(f"eta = {eta:.4g} -> n_q = {est.n_q:.3g} m^-3 (interval {est.low:.3g} .. {est.high:.3g})")
    return EXIT_OK


def cmd_correlate(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg)
    man = Manifest("correlate", cfg, out)
    if args.traces:
        traces = [io.read_frequency_trace(p) for p in args.traces]
        if len(traces) < 2:
            raise UsageError("correlate needs at least two traces")
        curves = pl.correlate_traces(traces, cfg.analysis)
        names = [t.meta.get("probe", f"T{i}") for i, t in enumerate(traces)]
        peaks = [c.peak(0) for c in curves]
        n = int(np.sum(traces[0].valid))
        labels = [f"{names[0]}_{nm}" for nm in names[1:]]
        seps = None
    else:
        res = pl.correlate(cfg)
        curves, peaks, n = res.curves, res.peaks, res.n_points
        labels = [f"M1_M{k + 2}" for k in range(len(curves))]
        seps = res.separations
        for t in res.traces:
            man.add(io.write_frequency_trace(out / f"trace_{t.meta['probe']}.txt", t, _header(cfg)))
    for lab, c in zip(labels, curves):
        man.add(io.write_correlation(out / f"xcorr_{lab}.txt", c, _header(cfg, peak=c.peak(0))))
    cols = {"pair": np.array(labels, dtype=object), "peak": np.array(peaks, dtype=float)}
    if seps is not None:
        cols["separation_m"] = seps
    man.add(io.write_table(out / "correlation_peaks.txt", cols, _header(cfg, n_points=n,
                                                                          null_band=3 / np.sqrt(n)),
                           kind="correlation_peaks"))
    man.write()
    for lab, p in zip(labels, peaks):
        print(f"{lab}: peak = {p:.3f}")
    print(f"null band 3/sqrt(N) = {3 / np.sqrt(n):.3f} (N = {n})")
    return EXIT_OK


# --------------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment configuration (YAML)")
    common.add_argument("--seed", type=int, metavar="N", help="master seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    common.add_argument("--jobs", type=int, metavar="N", help="worker processes (default: available CPUs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="chargenoise", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="simulate charges and synthesise sweeps")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", parents=[common], help="fit sweeps and compute sigma_f, tau and eta")
    p.add_argument("inputs", nargs="*", help="sweep files (default: sweeps_*.txt in the output directory)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep-power", parents=[common], help="tau and sigma_f versus guided power")
    p.add_argument("--powers", type=_floats, help="comma-separated guided fluxes in photons/s")
    p.set_defaults(func=cmd_sweep_power)

    p = sub.add_parser("scan-focus", parents=[common], help="normalised 1/tau versus auxiliary focus position")
    p.add_argument("--positions", type=_floats, help="comma-separated focus positions in m")
    p.set_defaults(func=cmd_scan_focus)

    p = sub.add_parser("calibrate", parents=[common], help="simulate eta(n_q) calibration curve")
    p.add_argument("--force", action="store_true", help="recompute even if a matching calibration exists")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("infer", parents=[common], help="infer the charge density from eta")
    p.add_argument("--calibration", metavar="PATH", help="calibration file (default: OUT/calibration.txt)")
    p.add_argument("--eta", type=float, help="measured eta")
    p.add_argument("--trace", metavar="PATH", help="frequency trace written by analyze")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("correlate", parents=[common], help="spatial cross-correlation of probes")
    p.add_argument("--traces", nargs="+", metavar="PATH", help="correlate existing trace files instead")
    p.set_defaults(func=cmd_correlate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"chargenoise: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"chargenoise: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FingerprintMismatchError, GridMismatchError) as exc:
        print(f"chargenoise: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DegradedDataError, BelowSensitivityError, ExtrapolationError, FitError) as exc:
        print(f"chargenoise: quality failure: {exc}", file=sys.stderr)
        return EXIT_QUALITY


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
