"""End-to-end experiments: simulate charges, synthesise sweeps, fit, analyse."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from chargenoise.config import ExperimentConfig, child_seed, seed_int
from chargenoise.dynamics import AuxFocus, EventTrace, IlluminationConfig, JumpModel, field_timeline, simulate
from chargenoise.errors import DegradedDataError, FitError
from chargenoise.fitting import FitResult, fit_gaussian, fit_lorentzian_batch
from chargenoise.model import BiasField, ChargeEnsemble, geometry_for_probes, nanoguide_field, sample_ensemble
from chargenoise.spectro import FrequencyTrace, SweepBatch, SweepConfig, synthesize_campaign
from chargenoise.stats import (
    AnalysisSettings,
    CorrelationCurve,
    EtaCalibration,
    StepHistogram,
    TunabilityScan,
    autocorrelation,
    cross_correlation,
    fit_correlation_time,
    non_gaussianity_curve,
    robust_center_rms,
    step_histogram,
    tunability_scan,
)

log = logging.getLogger(__name__)

FWHM_PER_SIGMA = 2 * np.sqrt(2 * np.log(2))
MAX_FLAGGED_FRACTION = 0.5


def default_jobs() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def parallel_map(fn: Callable, tasks: Sequence, jobs: int = 1) -> list:
    """``[fn(t) for t in tasks]``, on a process pool when ``jobs > 1``."""
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


# --------------------------------------------------------------------------
# Campaigns

def default_warmup(illum: IlluminationConfig) -> float:
    """Five activation times at the guided flux.

    All charges start on their anchors, which is not a stationary state of
    the anchored-sphere kernel; data are recorded only after the warm-up.
    """
    rate = illum.kappa * illum.guided_flux
    return 5.0 / rate if rate > 0 else 0.0


def make_ensemble(cfg: ExperimentConfig, n_q: float | None = None, probes=None, seed=None) -> ChargeEnsemble:
    probes = cfg.probes if probes is None else probes
    geometry = geometry_for_probes(cfg.geometry, [p.position for p in probes])
    if seed is None:
        seed = cfg.ensemble_seed if cfg.ensemble_seed is not None else seed_int(child_seed(cfg.seed, "ensemble"))
    return sample_ensemble(cfg.n_q if n_q is None else n_q, geometry, seed)


@dataclass
class Campaign:
    ensemble: ChargeEnsemble
    trace: EventTrace
    batches: list[SweepBatch]
    t0: float
    seeds: dict = field(default_factory=dict)


def campaign_duration(sweep: SweepConfig, n_probes: int, t0: float) -> float:
    n = max(sweep.n_sweeps, 1)
    return t0 + (n - 1) / sweep.repetition_rate + n_probes * sweep.sweep_duration


def widen_window(sweep: SweepConfig, span: float) -> SweepConfig:
    """Change the sweep span at fixed bin width and sweep duration.

    The sweep rate grows with the span, so the dwell per bin shrinks by the
    same factor and the sweep still fits its repetition slot.
    """
    k = span / sweep.span
    return replace(sweep, span=span, bins=max(1, int(round(sweep.bins * k))), sweep_rate=sweep.sweep_rate * k)


def run_campaign(cfg: ExperimentConfig, stage: str = "campaign", keys: Iterable[int] = (),
                 ensemble: ChargeEnsemble | None = None, match_bias: bool = False) -> Campaign:
    """Sample (or reuse) an ensemble, simulate its dynamics and synthesise all sweeps.

    With ``match_bias`` every probe gets its own bias that absorbs the static
    field of the anchored charges at its position.
    """
    keys = tuple(keys)
    if ensemble is None:
        ensemble = make_ensemble(cfg)
    t0 = default_warmup(cfg.illumination) if cfg.warmup is None else cfg.warmup
    duration = campaign_duration(cfg.sweep, len(cfg.probes), t0)
    dyn_seed = seed_int(child_seed(cfg.seed, f"{stage}/dynamics", *keys))
    sweep_seed = seed_int(child_seed(cfg.seed, f"{stage}/sweeps", *keys))
    trace = simulate(ensemble, cfg.illumination, cfg.jump, duration, dyn_seed)
    timelines = [field_timeline(ensemble, trace, p.position) for p in cfg.probes]
    bias = [matched_bias(cfg, ensemble, j) for j in range(len(cfg.probes))] if match_bias else cfg.bias
    batches = synthesize_campaign(list(cfg.probes), ensemble, trace, bias, cfg.voltage, cfg.sweep,
                                  seed=sweep_seed, t0=t0, timelines=timelines)
    seeds = {"ensemble": ensemble.seed, "dynamics": dyn_seed, "sweeps": sweep_seed}
    return Campaign(ensemble, trace, batches, t0, seeds)


# --------------------------------------------------------------------------
# Analysis of one probe

def fit_batch(batch: SweepBatch) -> FrequencyTrace:
    """Fit every sweep of a batch; the sweep start time labels each point."""
    fits = fit_lorentzian_batch(batch.freqs, batch.counts, batch.detection)
    return FrequencyTrace(batch.t_start, fits.f_c, fits.sigma_f_c, fits.flags,
                          {"probe": batch.probe_name, "detection": batch.detection})


def check_quality(trace: FrequencyTrace, limit: float = MAX_FLAGGED_FRACTION) -> float:
    """Fraction of flagged sweeps; raises DegradedDataError above ``limit``."""
    frac = 1.0 - float(np.mean(trace.valid)) if len(trace) else 1.0
    if frac > limit:
        raise DegradedDataError(f"degraded data: {frac:.0%} of sweeps flagged")
    return frac


@dataclass
class TraceSummary:
    n_sweeps: int
    n_ok: int
    f_mean: float
    sigma_f: float
    tau: float = float("nan")
    tau_err: float = float("nan")
    eta: float = float("nan")
    autocorrelation: CorrelationCurve | None = None
    tau_fit: FitResult | None = None
    histogram: StepHistogram | None = None
    gaussian: np.ndarray | None = None
    ratio: np.ndarray | None = None

    def row(self) -> dict:
        return {"n_sweeps": self.n_sweeps, "n_ok": self.n_ok, "f_mean_Hz": self.f_mean,
                "sigma_f_Hz": self.sigma_f, "tau_s": self.tau, "tau_err_s": self.tau_err, "eta": self.eta}


def summarize(trace: FrequencyTrace, settings: AnalysisSettings, tau: bool = True, eta: bool = True) -> TraceSummary:
    f_mean, sigma_f = robust_center_rms(trace, settings)
    out = TraceSummary(len(trace), int(np.sum(trace.valid)), f_mean, sigma_f)
    if tau:
        curve = autocorrelation(trace, settings=settings)
        out.autocorrelation = curve
        try:
            fit = fit_correlation_time(curve, settings)
            out.tau_fit = fit
            if fit.converged:
                out.tau, out.tau_err = fit["tau"], fit.stderr("tau")
        except FitError as exc:
            log.warning("tau fit failed: %s", exc)
    if eta:
        hist = step_histogram(trace, settings)
        out.histogram = hist
        try:
            ng = non_gaussianity_curve(hist, settings)
            out.eta, out.gaussian, out.ratio = ng.eta, ng.gaussian_counts, ng.ratio
        except FitError as exc:
            log.warning("non-Gaussianity failed: %s", exc)
    return out


# --------------------------------------------------------------------------
# Power sweep

@dataclass
class PowerSweepResult:
    guided_flux: np.ndarray
    tau: np.ndarray
    tau_err: np.ndarray
    sigma_f: np.ndarray
    n_ok: np.ndarray
    slope: float = float("nan")
    slope_err: float = float("nan")

    @property
    def sigma_f_spread(self) -> float:
        """(max - min) / mean of sigma_f over the powers."""
        return float(np.ptp(self.sigma_f) / np.mean(self.sigma_f))


def power_config(cfg: ExperimentConfig, flux: float) -> ExperimentConfig:
    """Config at guided flux ``flux``: sweep timing and detected flux scale with it.

    Counts per bin and the number of samples per correlation time are then the
    same at every power.
    """
    ps = cfg.power_sweep
    factor = flux / ps.reference_flux
    illum = replace(cfg.illumination, guided_flux=float(flux))
    sweep = replace(cfg.sweep.scaled_timing(factor), n_sweeps=ps.n_sweeps)
    return replace(cfg, illumination=illum, sweep=sweep, warmup=None)


def _power_task(args):
    cfg, i, flux, ensemble = args
    camp = run_campaign(power_config(cfg, flux), "power", (i,), ensemble)
    trace = fit_batch(camp.batches[0])
    check_quality(trace)
    return summarize(trace, cfg.analysis, tau=True, eta=False)


def loglog_slope(x, y, y_err=None) -> tuple[float, float]:
    """Least-squares slope of log y on log x and its standard error."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if len(lx) < 3:
        return float("nan"), float("nan")
    coef, cov = np.polyfit(lx, ly, 1, cov=True)
    return float(coef[0]), float(np.sqrt(cov[0, 0]))


def power_sweep(cfg: ExperimentConfig, fluxes: Sequence[float] | None = None, jobs: int = 1) -> PowerSweepResult:
    fluxes = np.asarray(cfg.power_sweep.guided_flux if fluxes is None else fluxes, dtype=float)
    ensemble = make_ensemble(cfg)
    res = parallel_map(_power_task, [(cfg, i, f, ensemble) for i, f in enumerate(fluxes)], jobs)
    out = PowerSweepResult(fluxes, np.array([r.tau for r in res]), np.array([r.tau_err for r in res]),
                           np.array([r.sigma_f for r in res]), np.array([r.n_ok for r in res]))
    if len(fluxes) >= 3 and np.all(np.isfinite(out.tau)):
        out.slope, out.slope_err = loglog_slope(fluxes, out.tau)
    return out


# --------------------------------------------------------------------------
# Voltage scan

@dataclass
class VoltageScanResult:
    scan: TunabilityScan
    traces: dict


def voltage_scan_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Scan settings: the correlation time is about one sweep period, so the
    sweeps at each voltage are close to independent; faster sweeps (with the
    detected flux raised by the same factor) keep each sweep much shorter
    than the correlation time.
    """
    vs = cfg.voltage_scan
    k = vs.sweep_speedup
    sweep = replace(cfg.sweep, n_sweeps=vs.n_sweeps, sweep_rate=cfg.sweep.sweep_rate * k,
                    detector_flux=cfg.sweep.detector_flux * k)
    illum = replace(cfg.illumination, guided_flux=vs.guided_flux)
    return replace(cfg, sweep=sweep, illumination=illum, probes=cfg.probes[:1])


def voltage_scan(cfg: ExperimentConfig, voltages: Sequence[float] | None = None, n_q: float | None = None,
                 stage: str = "vscan") -> VoltageScanResult:
    """Step the electrode voltage through ``voltages`` on one continuous charge trace.

    Every voltage gets ``voltage_scan.n_sweeps`` consecutive sweeps; the charge
    dynamics runs uninterrupted across the whole scan. With
    ``voltage_scan.match_bias`` the configured bias is taken as the net static
    field at the probe, anchors included.
    """
    cfg = voltage_scan_config(cfg)
    vs = cfg.voltage_scan
    voltages = np.asarray(vs.voltages if voltages is None else voltages, dtype=float)
    sweep = cfg.sweep
    probe = cfg.probes[0]
    ensemble = make_ensemble(cfg, n_q=n_q, probes=[probe])
    bias = matched_bias(cfg, ensemble) if vs.match_bias else cfg.bias
    t0 = default_warmup(cfg.illumination) if cfg.warmup is None else cfg.warmup
    block = vs.n_sweeps / sweep.repetition_rate
    duration = t0 + len(voltages) * block
    trace = simulate(ensemble, cfg.illumination, cfg.jump, duration,
                     seed_int(child_seed(cfg.seed, f"{stage}/dynamics")))
    timeline = field_timeline(ensemble, trace, probe.position)
    traces = {}
    for i, V in enumerate(voltages):
        batch = synthesize_campaign(probe, ensemble, trace, bias, float(V), sweep,
                                    seed=seed_int(child_seed(cfg.seed, f"{stage}/sweeps", i)),
                                    t0=t0 + i * block, timelines=[timeline])[0]
        traces[float(V)] = fit_batch(batch)
    return VoltageScanResult(tunability_scan(traces, cfg.analysis), traces)


# --------------------------------------------------------------------------
# Amplitude scaling with jump length and density

@dataclass
class AmplitudeScalingResult:
    jump_lengths: np.ndarray
    densities: np.ndarray
    sigma_f: np.ndarray          # (n_d, n_q), floor removed, pooled over ensembles
    sigma_runs: np.ndarray       # (n_d, n_q, ensembles), raw robust RMS
    floor: float
    exponents: np.ndarray        # (d, n_q)
    exponent_errors: np.ndarray


def amplitude_scaling_config(cfg: ExperimentConfig) -> ExperimentConfig:
    a = cfg.amplitude_scaling
    sweep = replace(widen_window(cfg.sweep, a.span), n_sweeps=a.n_sweeps)
    return replace(cfg, sweep=sweep, voltage=a.voltage, probes=cfg.probes[:1])


def _amplitude_task(args):
    cfg, keys, d, n_q, ens_seed = args
    run_cfg = replace(cfg, jump=JumpModel(d), n_q=n_q)
    ensemble = make_ensemble(run_cfg, n_q=n_q, seed=ens_seed)
    camp = run_campaign(run_cfg, "amplitude", keys, ensemble, match_bias=True)
    trace = fit_batch(camp.batches[0])
    check_quality(trace)
    return robust_center_rms(trace, cfg.analysis)[1]


def power_law_exponents(x: np.ndarray, y: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares fit of log v = c + a log x + b log y on a grid; returns (a, b) and errors."""
    X, Y = np.meshgrid(np.log(x), np.log(y), indexing="ij")
    design = np.column_stack([np.ones(X.size), X.ravel(), Y.ravel()])
    target = np.log(values).ravel()
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ coef
    dof = max(len(target) - 3, 1)
    cov = np.linalg.inv(design.T @ design) * (resid @ resid) / dof
    return coef[1:], np.sqrt(np.diag(cov))[1:]


def amplitude_scaling(cfg: ExperimentConfig, jobs: int = 1) -> AmplitudeScalingResult:
    """sigma_f on a (jump length, density) grid and its power-law exponents.

    Each ensemble seed is shared across the grid, so lower densities are
    subsets of higher ones. The per-probe static field is absorbed into the
    bias and the charge-free fit floor is removed in quadrature.
    """
    a = cfg.amplitude_scaling
    cfg = amplitude_scaling_config(cfg)
    ds, ns = np.asarray(a.jump_lengths, float), np.asarray(a.densities, float)
    seeds = [seed_int(child_seed(cfg.seed, "amplitude/ensemble", e)) for e in range(a.ensembles)]
    tasks = [(cfg, (i, j, e), d, n, seeds[e])
             for i, d in enumerate(ds) for j, n in enumerate(ns) for e in range(a.ensembles)]
    tasks.append((cfg, (len(ds), 0, 0), float(ds[0]), 0.0, seeds[0]))
    out = np.array(parallel_map(_amplitude_task, tasks, jobs))
    floor = float(out[-1])
    runs = out[:-1].reshape(len(ds), len(ns), a.ensembles)
    pooled = np.sqrt(np.clip(np.mean(runs ** 2, axis=2) - floor ** 2, 0.0, None))
    exps, errs = power_law_exponents(ds, ns, pooled)
    return AmplitudeScalingResult(ds, ns, pooled, runs, floor, exps, errs)


# --------------------------------------------------------------------------
# Spatial cross-correlation

@dataclass
class CorrelateResult:
    separations: np.ndarray
    peaks: np.ndarray
    curves: list
    n_points: int
    traces: list

    @property
    def null_band(self) -> float:
        return 3.0 / np.sqrt(self.n_points)


def correlate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Reference probe plus one probe per separation, all at the same standoff.

    The sweep window is widened to ``correlate.span`` at unchanged bin width
    and sweep duration, since the probes sit close to the guide.
    """
    cs = cfg.correlate
    base = cfg.probes[0]
    probes = [replace(base, name="M1", position=np.array([0.0, cs.standoff, 0.0]))]
    for k, s in enumerate(cs.separations):
        probes.append(replace(base, name=f"M{k + 2}", position=np.array([s, cs.standoff, 0.0])))
    illum = replace(cfg.illumination, guided_flux=cs.guided_flux)
    sweep = replace(widen_window(cfg.sweep, cs.span), repetition_rate=cs.repetition_rate, n_sweeps=cs.n_sweeps)
    return replace(cfg, probes=tuple(probes), illumination=illum, sweep=sweep, voltage=cs.voltage)


def correlate(cfg: ExperimentConfig, stage: str = "correlate") -> CorrelateResult:
    ccfg = correlate_config(cfg)
    camp = run_campaign(ccfg, stage, match_bias=cfg.correlate.match_bias)
    traces = [fit_batch(b) for b in camp.batches]
    for t in traces:
        check_quality(t)
    curves = [cross_correlation(traces[0], t, settings=cfg.analysis) for t in traces[1:]]
    peaks = np.array([c.peak(0) for c in curves])
    n = int(np.sum(traces[0].valid))
    return CorrelateResult(np.asarray(cfg.correlate.separations, float), peaks, curves, n, traces)


def correlate_traces(traces: Sequence[FrequencyTrace], settings: AnalysisSettings) -> list[CorrelationCurve]:
    return [cross_correlation(traces[0], t, settings=settings) for t in traces[1:]]


# --------------------------------------------------------------------------
# Auxiliary focus scan

@dataclass
class FocusScanResult:
    positions: np.ndarray
    tau: np.ndarray
    tau_ref: float
    rate_norm: np.ndarray
    fit: FitResult

    @property
    def fwhm(self) -> float:
        return FWHM_PER_SIGMA * self.fit["sigma"]

    @property
    def peak_rate(self) -> float:
        return self.fit["amplitude"] + self.fit["offset"]


def _focus_task(args):
    cfg, i, center = args
    fs = cfg.focus_scan
    aux = None if center is None else AuxFocus(float(center), fs.aux_flux, fs.fwhm)
    illum = IlluminationConfig(fs.guided_flux, cfg.illumination.kappa, aux)
    sweep = replace(cfg.sweep, repetition_rate=fs.repetition_rate, n_sweeps=fs.n_sweeps)
    run_cfg = replace(cfg, illumination=illum, sweep=sweep, probes=cfg.probes[:1])
    # Same sample (ensemble) at every focus position.
    camp = run_campaign(run_cfg, "focus", (i,), make_ensemble(cfg, probes=cfg.probes[:1]))
    trace = fit_batch(camp.batches[0])
    check_quality(trace)
    return summarize(trace, cfg.analysis, tau=True, eta=False).tau


def focus_scan(cfg: ExperimentConfig, positions: Sequence[float] | None = None, jobs: int = 1) -> FocusScanResult:
    fs = cfg.focus_scan
    x = np.asarray(fs.positions if positions is None else positions, dtype=float)
    tasks = [(cfg, 0, None)] + [(cfg, i + 1, c) for i, c in enumerate(x)]
    taus = np.array(parallel_map(_focus_task, tasks, jobs))
    tau_ref, tau = taus[0], taus[1:]
    rate = tau_ref / tau
    fit = fit_gaussian(x, rate, offset=True)
    return FocusScanResult(x, tau, float(tau_ref), rate, fit)


# --------------------------------------------------------------------------
# Non-Gaussianity calibration

def calibration_config(cfg: ExperimentConfig) -> ExperimentConfig:
    sweep = replace(cfg.sweep, n_sweeps=cfg.calibration.n_sweeps)
    return replace(cfg, sweep=sweep, probes=cfg.probes[:1])


def calibration_jump(cfg: ExperimentConfig, n_q: float) -> JumpModel:
    """Jump length used at density ``n_q`` during calibration.

    With ``match_sigma`` the displacement scales as ``n_q**-0.5`` from the
    configured (n_q, d), so every grid point has the same expected sigma_f
    and eta compares step-size shapes only.
    """
    if not cfg.calibration.match_sigma or n_q <= 0 or cfg.n_q <= 0:
        return cfg.jump
    return JumpModel(cfg.jump.d * float(np.sqrt(cfg.n_q / n_q)))


def matched_bias(cfg: ExperimentConfig, ensemble: ChargeEnsemble, probe: int = 0) -> BiasField:
    """Bias whose strain term absorbs the static field of the anchored charges.

    The static part of the charge field is indistinguishable from strain in a
    measurement, so synthetic samples are compared at equal total bias.
    """
    E_static = nanoguide_field(ensemble, cfg.probes[probe].position)
    return replace(cfg.bias, E_cr=cfg.bias.E_cr - E_static)


def measure_eta(cfg: ExperimentConfig, n_q: float, stage: str, keys: Iterable[int] = ()) -> float:
    """eta of one synthetic data set, analysed exactly like measured data."""
    keys = tuple(keys)
    ens = make_ensemble(cfg, n_q=n_q, seed=seed_int(child_seed(cfg.seed, f"{stage}/ensemble", *keys)))
    if cfg.calibration.match_sigma and stage.startswith("calibration"):
        cfg = replace(cfg, bias=matched_bias(cfg, ens))
    camp = run_campaign(cfg, stage, keys, ens)
    trace = fit_batch(camp.batches[0])
    del camp
    check_quality(trace)
    return summarize(trace, cfg.analysis, tau=False, eta=True).eta


def _eta_task(args):
    cfg, n_q, stage, keys = args
    return measure_eta(cfg, n_q, stage, keys)


def eta_calibration(cfg: ExperimentConfig, grid: Sequence[float] | None = None, replicates: int | None = None,
                    seed: int | None = None, jobs: int = 1) -> EtaCalibration:
    ccfg = calibration_config(cfg if seed is None else replace(cfg, seed=int(seed)))
    grid = np.asarray(ccfg.calibration.densities if grid is None else grid, dtype=float)
    replicates = ccfg.calibration.replicates if replicates is None else int(replicates)
    tasks = [(replace(ccfg, jump=calibration_jump(ccfg, float(n))), float(n), "calibration", (i, r))
             for i, n in enumerate(grid) for r in range(replicates)]
    tasks += [(ccfg, 0.0, "calibration/baseline", (r,)) for r in range(replicates)]
    etas = np.array(parallel_map(_eta_task, tasks, jobs))
    reps = etas[: len(grid) * replicates].reshape(len(grid), replicates)
    base = etas[len(grid) * replicates:]
    cal = EtaCalibration(grid, reps.mean(axis=1), reps.std(axis=1, ddof=1), float(base.mean()),
                         ccfg.analysis_fingerprint(), reps, base, ccfg.fingerprint())
    if not cal.monotone:
        log.warning("calibration curve is not monotone decreasing: %s", np.round(cal.eta, 3))
    return cal
