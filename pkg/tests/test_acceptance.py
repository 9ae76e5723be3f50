"""Acceptance criteria 1 to 8, each reported as one PASS/FAIL line.

Criteria 1 to 7 run the full simulation pipeline at the default configuration
and take about 20 minutes on one core in total.
"""

from __future__ import annotations

import shutil
import time
from functools import lru_cache

import numpy as np
import pytest
from scipy import stats as sps

from chargenoise import io
from chargenoise import pipeline as pl
from chargenoise.cli import EXIT_OK, main
from chargenoise.config import ExperimentConfig
from chargenoise.dynamics import IlluminationConfig, JumpModel, jump_rates, simulate
from chargenoise.fitting import fit_exponential, fit_gaussian, fit_lorentzian_batch, fit_parabola, gaussian
from chargenoise.model import BiasField, MoleculeProbe, NanoguideGeometry, sample_ensemble
from chargenoise.spectro import FrequencyTrace, SweepConfig, lineshape, synthesize_sweep
from chargenoise.stats import autocorrelation, infer_density
from conftest import ACCEPTANCE_KEY

pytestmark = pytest.mark.acceptance


def report(request, number: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    request.config.stash.setdefault(ACCEPTANCE_KEY, []).append(line)
    capman = request.config.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print("\n" + line, flush=True)
    assert ok, line


@lru_cache(maxsize=1)
def _power_sweep():
    t = time.perf_counter()
    res = pl.power_sweep(ExperimentConfig())
    return res, time.perf_counter() - t


# ---------------------------------------------------------------- 1, 2

def test_criterion_1_rate_scaling(request):
    res, elapsed = _power_sweep()
    taus = ", ".join(f"{t:.3g}" for t in res.tau)
    ok = abs(res.slope + 1.0) <= 0.1 and elapsed < 600
    report(request, 1, ok, f"slope {res.slope:.3f} +/- {res.slope_err:.3f} (target -1.0 +/- 0.1), "
                           f"tau = [{taus}] s at P = 3e5..3e8, {elapsed:.0f} s (limit 600 s)")


def test_criterion_2_power_independence(request):
    res, _ = _power_sweep()
    spread = res.sigma_f_spread
    sig = ", ".join(f"{s / 1e6:.2f}" for s in res.sigma_f)
    report(request, 2, spread < 0.15, f"sigma_f = [{sig}] MHz, spread {spread:.1%} (limit 15%)")


# ---------------------------------------------------------------- 3

def test_criterion_3_amplitude_scaling(request):
    res = pl.amplitude_scaling(ExperimentConfig())
    (a_d, a_n), (e_d, e_n) = res.exponents, res.exponent_errors
    ok = abs(a_d - 1.0) <= 0.1 and abs(a_n - 0.5) <= 0.1
    report(request, 3, ok, f"d exponent {a_d:.3f} +/- {e_d:.3f} (1.0 +/- 0.1), "
                           f"n_q exponent {a_n:.3f} +/- {e_n:.3f} (0.5 +/- 0.1), floor {res.floor / 1e6:.2f} MHz")


# ---------------------------------------------------------------- 4

def test_criterion_4_tunability_proportionality(request):
    cfg = ExperimentConfig()
    scan = pl.voltage_scan(cfg).scan
    control = pl.voltage_scan(cfg, n_q=0.0, stage="vscan/control").scan
    lin, r = scan.slope_linearity(), scan.proportionality()
    r0 = control.proportionality()
    floor_lo, floor_hi = control.sigma_f.min(), control.sigma_f.max()
    pinned = 2e6 <= floor_lo and floor_hi <= 6e6
    ok = lin > 0.95 and r > 0.9 and abs(r0) < 0.3 and pinned
    report(request, 4, ok, f"|df/dV| linearity R^2 {lin:.4f} (> 0.95), Pearson {r:.3f} (> 0.9); control "
                           f"sigma_f {floor_lo / 1e6:.2f}..{floor_hi / 1e6:.2f} MHz (4 MHz +/- 50%), "
                           f"|r| {abs(r0):.3f} (< 0.3)")


# ---------------------------------------------------------------- 5

def test_criterion_5_spatial_locality(request):
    res = pl.correlate(ExperimentConfig())
    near, mid, far = res.peaks
    band = res.null_band
    ok = near > 0.8 and 0.15 <= mid <= 0.5 and far < band
    report(request, 5, ok, f"peaks {near:.3f} (> 0.8) at 26 nm, {mid:.3f} ([0.15, 0.5]) at 80 nm, "
                           f"{far:.3f} (< 3/sqrt(N) = {band:.3f}) at 2 um")


# ---------------------------------------------------------------- 6

def test_criterion_6_focus_scan(request):
    res = pl.focus_scan(ExperimentConfig())
    fwhm = res.fwhm
    ok = abs(fwhm - 1e-6) <= 0.2e-6
    report(request, 6, ok, f"FWHM {fwhm * 1e6:.3f} um (1.0 +/- 0.2 um), peak normalised rate {res.peak_rate:.2f}")


# ---------------------------------------------------------------- 7

def test_criterion_7_density_inference(request):
    cfg = ExperimentConfig()
    t = time.perf_counter()
    cal = pl.eta_calibration(cfg)
    eta = pl.measure_eta(cfg, 2.33e22, "measure")
    est = infer_density(eta, cal)
    elapsed = time.perf_counter() - t
    ratio = est.n_q / 2.33e22
    ok = 0.5 <= ratio <= 2.0 and cal.monotone and elapsed < 1800
    curve = ", ".join(f"{e:.1f}" for e in cal.eta)
    report(request, 7, ok, f"eta(n_q) = [{curve}] monotone={cal.monotone}, baseline {cal.baseline:.2f}; "
                           f"measured eta {eta:.2f} -> n_q {est.n_q:.3g} (truth 2.33e22, ratio {ratio:.2f}), "
                           f"{elapsed:.0f} s (limit 1800 s)")


# ---------------------------------------------------------------- 8

SMALL = """\
seed: 5
sweep:
  n_sweeps: 300
power_sweep:
  guided_flux_photons_per_s: [3.0e6, 3.0e7, 3.0e8]
  n_sweeps: 300
focus_scan:
  positions_m: [-2.0e-6, -1.0e-6, 0.0, 1.0e-6, 2.0e-6]
  n_sweeps: 200
  repetition_rate_per_s: 4.0
correlate:
  separations_m: [26.0e-9, 2.0e-6]
  n_sweeps: 200
calibration:
  densities_per_m3: [2.5e21, 2.5e22, 2.5e23]
  replicates: 3
  n_sweeps: 300
"""


def _estimator_checks(tmp_path) -> dict[str, bool]:
    checks = {}
    rng = np.random.default_rng(2024)

    freqs = np.linspace(-5e8, 5e8, 200)
    fit = fit_lorentzian_batch(freqs, 1000 * lineshape(freqs, 25e6, 30e6, 0.13)).result(0)
    checks["lorentzian roundtrip"] = (abs(fit["f_c"] - 25e6) < 1e-6 * 25e6
                                      and abs(fit["gamma"] / 30e6 - 1) < 1e-6 and abs(fit["depth"] / 0.13 - 1) < 1e-6)
    x = np.linspace(-10, 10, 41)
    g = fit_gaussian(x, gaussian(x, 0.7, 2.3, 150.0))
    checks["gaussian roundtrip"] = all(abs(g[k] / v - 1) < 1e-6 for k, v in (("mu", 0.7), ("sigma", 2.3),
                                                                          ("amplitude", 150.0)))
    lags = np.arange(40) * 0.1
    checks["exponential roundtrip"] = abs(fit_exponential(lags, np.exp(-lags))["tau"] - 1) < 1e-6
    V = np.linspace(-30, 30, 25)
    p = fit_parabola(V, -2.5e5 * V**2 + 3e6 * V + 7e6)
    checks["parabola roundtrip"] = abs(p["a"] / -2.5e5 - 1) < 1e-6 and abs(p["b"] / 3e6 - 1) < 1e-6

    n = 4000
    curve = autocorrelation(FrequencyTrace.from_values(np.arange(n) * 0.1, rng.normal(size=n)), max_lag=100)
    checks["autocorrelation C(0)=1"] = curve.values[0] == 1.0
    checks["white-noise null band"] = np.mean(np.abs(curve.values[1:]) < 3 / np.sqrt(n)) >= 0.99

    probe = MoleculeProbe(np.array([0.0, 150e-9, 0.0]))
    ens = sample_ensemble(2.5e22, seed=1)
    still = simulate(ens, IlluminationConfig(0.0), JumpModel(), 10.0, 1)
    bias = BiasField(E_cr=(0.0, 0.0, -5e4))
    cfg = SweepConfig(center=3e9 + 4e14)  # far wings: flat expectation
    counts = np.concatenate([synthesize_sweep(probe, ens, still, bias, 20.0, cfg, 0.1 * k, seed=k).counts
                             for k in range(50)])
    disp = counts.var() / counts.mean()
    checks["Poisson dispersion in [0.9, 1.1]"] = 0.9 <= disp <= 1.1

    few = sample_ensemble(100 / NanoguideGeometry().volume, seed=3)
    trace = simulate(few, IlluminationConfig(3e7), JumpModel(), 110.0, seed=4)
    R = jump_rates(few, IlluminationConfig(3e7)).sum()
    checks["Gillespie waiting-time KS p > 0.01"] = sps.kstest(np.diff(trace.t[:10_001]), "expon",
                                                              args=(0, 1 / R)).pvalue > 0.01

    cfg_path = tmp_path / "small.yaml"
    cfg_path.write_text(SMALL)
    out = tmp_path / "det"

    def sums():
        return {q.name: io.sha256_file(q) for q in sorted(out.iterdir()) if q.name != "manifest.json"}

    commands = [("simulate",), ("analyze",), ("sweep-power",), ("scan-focus",), ("correlate",), ("calibrate",)]
    det = True
    for cmd in commands:
        seen = []
        for _ in range(2):
            shutil.rmtree(out, ignore_errors=True)
            if cmd == ("analyze",):
                det &= main(["simulate", "--config", str(cfg_path), "--out", str(out)]) == EXIT_OK
            det &= main([*cmd, "--config", str(cfg_path), "--out", str(out), "--jobs", "1"]) == EXIT_OK
            seen.append(sums())
        det &= seen[0] == seen[1]
    checks["determinism checksums for all commands"] = bool(det)
    return checks


def test_criterion_8_estimator_suite(request, tmp_path, capsys):
    t = time.perf_counter()
    checks = _estimator_checks(tmp_path)
    elapsed = time.perf_counter() - t
    capsys.readouterr()
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and elapsed < 60
    detail = f"{len(checks) - len(failed)}/{len(checks)} checks in {elapsed:.0f} s (limit 60 s)"
    if failed:
        detail += "; failed: " + ", ".join(failed)
    report(request, 8, ok, detail)
