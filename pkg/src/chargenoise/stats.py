"""Estimators applied to fitted frequency traces.

Robust centre and RMS, Stark tunability scans, auto- and cross-correlations,
step-size histograms, the regularised non-Gaussianity, and the calibration
that maps non-Gaussianity back to a charge density.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.signal import savgol_filter

from chargenoise.errors import (
    BelowSensitivityError,
    ExtrapolationError,
    FitError,
    GridMismatchError,
)
from chargenoise.fitting import FitResult, ParabolaFit, fit_exponential, fit_gaussian, fit_parabola
from chargenoise.spectro import FrequencyTrace

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnalysisSettings:
    clip_sigmas: float = 5.0
    clip_passes: int = 3
    step_bin_width: float = 0.4
    step_range: float = 5.0
    regularization: float = 1.0
    max_lag_fraction: float = 0.25
    tau_window: float = 5.0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


DEFAULT_SETTINGS = AnalysisSettings()


# --------------------------------------------------------------------------
# Centre and RMS

def robust_center_rms(trace: FrequencyTrace, settings: AnalysisSettings = DEFAULT_SETTINGS,
                      min_points: int = 10) -> tuple[float, float]:
    """Mean and standard deviation after iterative sigma clipping of unflagged points."""
    f = trace.f_c[trace.valid & np.isfinite(trace.f_c)]
    if len(f) < min_points:
        raise ValueError(f"need at least {min_points} unflagged points, got {len(f)}")
    keep = np.ones(len(f), dtype=bool)
    for _ in range(settings.clip_passes):
        mean, sd = f[keep].mean(), f[keep].std(ddof=1)
        new = np.abs(f - mean) <= settings.clip_sigmas * sd if sd > 0 else keep
        if np.array_equal(new, keep):
            break
        keep = new
    sel = f[keep]
    return float(sel.mean()), float(sel.std(ddof=1))


@dataclass
class TunabilityScan:
    V: np.ndarray
    f_mean: np.ndarray
    sigma_f: np.ndarray
    df_dV: np.ndarray
    parabola: ParabolaFit
    local_slope: np.ndarray

    @property
    def abs_tunability(self) -> np.ndarray:
        return np.abs(self.df_dV)

    def proportionality(self) -> float:
        """Pearson correlation of sigma_f with |dF/dV|."""
        return float(np.corrcoef(self.sigma_f, self.abs_tunability)[0, 1])

    def slope_linearity(self) -> float:
        """R^2 of |finite-difference slope| regressed on distance from the vertex."""
        x = np.abs(self.V - self.parabola.vertex)
        y = np.abs(self.local_slope)
        coef = np.polyfit(x, y, 1)
        resid = y - np.polyval(coef, x)
        return float(1 - resid @ resid / np.sum((y - y.mean()) ** 2))


def tunability_scan(traces: Mapping[float, FrequencyTrace],
                    settings: AnalysisSettings = DEFAULT_SETTINGS) -> TunabilityScan:
    """Robust mean and RMS per voltage, parabola through the means, and its slope."""
    if len(traces) < 3:
        raise ValueError("tunability scan needs at least 3 voltages")
    V = np.array(sorted(traces), dtype=float)
    stats = [robust_center_rms(traces[v], settings) for v in sorted(traces)]
    f_mean = np.array([s[0] for s in stats])
    sigma = np.array([s[1] for s in stats])
    fit = fit_parabola(V, f_mean)
    return TunabilityScan(V, f_mean, sigma, fit.tunability(V), fit, local_slopes(V, f_mean))


def local_slopes(V: np.ndarray, f: np.ndarray, window: int = 7) -> np.ndarray:
    """dF/dV from the measured means alone, independent of the global parabola.

    Uniform scans use a Savitzky-Golay derivative (local quadratic over
    ``window`` points); otherwise second-order finite differences. Both are
    exact for a parabola.
    """
    f = f - f.mean()
    dV = np.diff(V)
    if len(V) >= window and np.allclose(dV, dV[0], rtol=1e-9, atol=0):
        return savgol_filter(f, window, 2, deriv=1, delta=float(dV[0]), mode="interp")
    return np.gradient(f, V, edge_order=2)


# --------------------------------------------------------------------------
# Correlations

@dataclass
class CorrelationCurve:
    lags: np.ndarray
    values: np.ndarray
    n_pairs: np.ndarray
    dt: float

    @property
    def lag_index(self) -> np.ndarray:
        return np.rint(self.lags / self.dt).astype(int)

    def at_lag(self, k: int) -> float:
        return float(self.values[np.flatnonzero(self.lag_index == k)[0]])

    def peak(self, window: int = 0) -> float:
        """Largest value within ``|lag| <= window`` sampling steps."""
        sel = np.abs(self.lag_index) <= window
        return float(np.max(self.values[sel]))


def _uniform_step(times: np.ndarray, rtol: float = 1e-6) -> float:
    if len(times) < 2:
        raise GridMismatchError("need at least 2 samples")
    d = np.diff(times)
    dt = float(np.median(d))
    if dt <= 0 or np.any(np.abs(d - dt) > rtol * dt):
        raise GridMismatchError("trace is not uniformly sampled")
    return dt


def _masked_deviation(trace: FrequencyTrace) -> tuple[np.ndarray, np.ndarray]:
    ok = trace.valid & np.isfinite(trace.f_c)
    z = np.zeros(len(trace))
    z[ok] = trace.f_c[ok] - trace.f_c[ok].mean()
    return z, ok.astype(float)


def _pair_means(sums: np.ndarray, pairs: np.ndarray, lags: np.ndarray, n: int) -> np.ndarray:
    """Mean product per available pair, tapered by (n - |k|)/n.

    Without gaps this is the plain biased sum / n; with gaps each lag is
    rescaled to the pairs actually present.
    """
    out = np.zeros_like(sums)
    ok = pairs > 0
    out[ok] = sums[ok] / pairs[ok] * (n - np.abs(lags[ok])) / n
    return out


def _xcorr_sums(a: np.ndarray, b: np.ndarray, max_lag: int) -> np.ndarray:
    """sum_i a_i b_{i+k} for k = -max_lag..max_lag via FFT."""
    n = len(a)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.conj(np.fft.rfft(a, size)) * np.fft.rfft(b, size)
    full = np.fft.irfft(spec, size)
    return np.concatenate([full[size - max_lag:], full[: max_lag + 1]])


def autocorrelation(trace: FrequencyTrace, max_lag: int | None = None,
                    settings: AnalysisSettings = DEFAULT_SETTINGS) -> CorrelationCurve:
    """Biased (1/N) mean-subtracted autocorrelation normalised to 1 at zero lag.

    Flagged sweeps are masked out; each lag is averaged over the pairs present.
    """
    if len(trace) < 100:
        raise ValueError("autocorrelation needs at least 100 points")
    dt = _uniform_step(trace.times)
    z, m = _masked_deviation(trace)
    L = int(len(trace) * settings.max_lag_fraction) if max_lag is None else int(max_lag)
    L = min(L, len(trace) - 1)
    sums = _xcorr_sums(z, z, L)[L:]
    pairs = np.rint(_xcorr_sums(m, m, L)[L:]).astype(int)
    c = _pair_means(sums, pairs, np.arange(L + 1), len(trace))
    values = c / c[0] if c[0] > 0 else np.zeros_like(c)
    if c[0] <= 0:
        values[0] = 1.0
    return CorrelationCurve(np.arange(L + 1) * dt, values, pairs, dt)


def align_traces(a: FrequencyTrace, b: FrequencyTrace, rtol: float = 1e-6):
    """Place two interleaved traces on a common slot grid (nearest slot)."""
    dt_a, dt_b = _uniform_step(a.times), _uniform_step(b.times)
    if abs(dt_a - dt_b) > rtol * dt_a:
        raise GridMismatchError(f"sampling steps differ: {dt_a} vs {dt_b}")
    t0 = min(a.times[0], b.times[0])
    sa = np.rint((a.times - t0) / dt_a).astype(int)
    sb = np.rint((b.times - t0) / dt_a).astype(int)
    if len(np.unique(sa)) != len(sa) or len(np.unique(sb)) != len(sb):
        raise GridMismatchError("two samples fall into the same slot")
    n = int(max(sa.max(), sb.max())) + 1
    out = []
    for tr, s in ((a, sa), (b, sb)):
        z, m = _masked_deviation(tr)
        zz, mm = np.zeros(n), np.zeros(n)
        zz[s], mm[s] = z, m
        out.append((zz, mm))
    return out, dt_a


def cross_correlation(trace_j: FrequencyTrace, trace_k: FrequencyTrace, max_lag: int | None = None,
                      settings: AnalysisSettings = DEFAULT_SETTINGS) -> CorrelationCurve:
    """C_jk(k) = (1/N) sum_i df_j,i df_k,i+k normalised by sqrt(C_jj(0) C_kk(0)).

    Sums over masked data are averaged over the pairs present, as in
    ``autocorrelation``.
    """
    ((zj, mj), (zk, mk)), dt = align_traces(trace_j, trace_k)
    n = len(zj)
    L = int(n * settings.max_lag_fraction) if max_lag is None else int(max_lag)
    L = min(L, n - 1)
    cjj = zj @ zj / max(mj.sum(), 1)
    ckk = zk @ zk / max(mk.sum(), 1)
    sums = _xcorr_sums(zj, zk, L)
    pairs = np.rint(_xcorr_sums(mj, mk, L)).astype(int)
    sums = _pair_means(sums, pairs, np.arange(-L, L + 1), n)
    norm = np.sqrt(cjj * ckk)
    values = sums / norm if norm > 0 else np.zeros_like(sums)
    return CorrelationCurve(np.arange(-L, L + 1) * dt, values, pairs, dt)


def fit_correlation_time(curve: CorrelationCurve, settings: AnalysisSettings = DEFAULT_SETTINGS) -> FitResult:
    """Exponential fit of an autocorrelation curve, zero lag excluded.

    The fit window extends to ``tau_window`` times the first lag where the
    curve drops below 1/e (at least 4 lags), which keeps the noisy far tail
    of the estimator out of the fit.
    """
    lags, vals = curve.lags[curve.lags >= 0], curve.values[curve.lags >= 0]
    below = np.flatnonzero(vals[1:] < np.exp(-1))
    if below.size:
        k_e = int(below[0]) + 1
        n_fit = min(len(lags) - 1, max(4, int(np.ceil(settings.tau_window * k_e))))
    else:
        n_fit = len(lags) - 1
    return fit_exponential(lags[: n_fit + 1], vals[: n_fit + 1], exclude_zero_lag=True)


# --------------------------------------------------------------------------
# Step histograms and non-Gaussianity

@dataclass
class StepHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    n_steps: int
    bin_width: float
    step_std: float

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


def frequency_steps(trace: FrequencyTrace) -> np.ndarray:
    """Differences between consecutive sweeps; pairs touching a flagged sweep are skipped."""
    ok = trace.valid & np.isfinite(trace.f_c)
    both = ok[:-1] & ok[1:]
    return np.diff(trace.f_c)[both]


def step_histogram(trace: FrequencyTrace, settings: AnalysisSettings = DEFAULT_SETTINGS,
                   min_pairs: int = 100) -> StepHistogram:
    """Histogram of consecutive-sweep steps in bins of ``step_bin_width`` step std.

    Bins are centred on zero and the range is symmetric: at least
    ``step_range`` std, extended so that every retained step is counted.
    """
    steps = frequency_steps(trace)
    if len(steps) < min_pairs:
        raise ValueError(f"need at least {min_pairs} consecutive unflagged pairs, got {len(steps)}")
    sd = float(steps.std(ddof=1))
    width = settings.step_bin_width * sd if sd > 0 else 1.0
    reach = max(settings.step_range * sd, float(np.max(np.abs(steps))))
    half = max(int(np.ceil(reach / width - 0.5)), 0)
    edges = (np.arange(-half, half + 2) - 0.5) * width
    idx = np.clip(np.floor(steps / width + 0.5).astype(int) + half, 0, 2 * half)
    counts = np.bincount(idx, minlength=2 * half + 1)
    return StepHistogram(edges, counts, len(steps), width, sd)


@dataclass
class NonGaussianity:
    eta: float
    ratio: np.ndarray
    gaussian_counts: np.ndarray
    fit: FitResult


def non_gaussianity_curve(hist: StepHistogram, settings: AnalysisSettings = DEFAULT_SETTINGS) -> NonGaussianity:
    """Regularised ratio of histogram to its Gaussian fit and the area above one."""
    fit = fit_gaussian(hist.centers, hist.counts)
    if not np.isfinite(fit["sigma"]) or fit["sigma"] <= 0:
        raise FitError("Gaussian fit of step histogram failed")
    g = fit["amplitude"] * np.exp(-0.5 * ((hist.centers - fit["mu"]) / fit["sigma"]) ** 2)
    reg = settings.regularization
    ratio = (hist.counts + reg) / (g + reg)
    eta = float(np.sum(np.clip(ratio - 1, 0, None)))
    return NonGaussianity(eta, ratio, g, fit)


def non_gaussianity(hist: StepHistogram, settings: AnalysisSettings = DEFAULT_SETTINGS) -> float:
    return non_gaussianity_curve(hist, settings).eta


# --------------------------------------------------------------------------
# Density calibration

@dataclass
class EtaCalibration:
    n_q: np.ndarray
    eta: np.ndarray
    eta_std: np.ndarray
    baseline: float
    fingerprint: str
    eta_replicates: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    baseline_replicates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    config_fingerprint: str = ""

    def __post_init__(self):
        self.n_q = np.asarray(self.n_q, dtype=float)
        self.eta = np.asarray(self.eta, dtype=float)
        self.eta_std = np.asarray(self.eta_std, dtype=float)
        if len(self.n_q) > 1 and np.any(np.diff(self.n_q) <= 0):
            raise ValueError("calibration grid must be strictly increasing")

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.eta) < 0))


@dataclass
class DensityEstimate:
    n_q: float
    low: float
    high: float


def infer_density(eta_measured: float, calibration: EtaCalibration) -> DensityEstimate:
    """Invert the calibration curve by linear interpolation of log n_q against eta.

    The interval propagates the replicate scatter at the crossing through the
    local slope of the curve.
    """
    if eta_measured <= calibration.baseline:
        raise BelowSensitivityError(
            f"eta={eta_measured:.4g} does not exceed the fit-noise baseline {calibration.baseline:.4g}")
    eta = calibration.eta
    logn = np.log(calibration.n_q)
    for i in range(len(eta) - 1):
        lo, hi = sorted((eta[i], eta[i + 1]))
        if lo <= eta_measured <= hi and eta[i] != eta[i + 1]:
            if not calibration.monotone:
                log.warning("calibration curve is not monotone; using first bracketing segment")
            frac = (eta_measured - eta[i]) / (eta[i + 1] - eta[i])
            ln = logn[i] + frac * (logn[i + 1] - logn[i])
            slope = (eta[i + 1] - eta[i]) / (logn[i + 1] - logn[i])
            spread = (1 - frac) * calibration.eta_std[i] + frac * calibration.eta_std[i + 1]
            dln = abs(spread / slope) if slope != 0 else np.inf
            return DensityEstimate(float(np.exp(ln)), float(np.exp(ln - dln)), float(np.exp(ln + dln)))
    raise ExtrapolationError(
        f"eta={eta_measured:.4g} outside calibrated range [{eta.min():.4g}, {eta.max():.4g}]")


def calibrate_eta(n_q_grid: Sequence[float], config, replicates: int = 3, seed: int | None = None,
                  jobs: int = 1) -> EtaCalibration:
    """Simulate and analyse ``replicates`` data sets per density, plus charge-free runs.

    Every run goes through the same sweep synthesis, Lorentzian fitting and
    step-histogram settings as measured data. ``config`` is an
    ``ExperimentConfig``.
    """
    from chargenoise.pipeline import eta_calibration  # noqa: PLC0415  (pipeline imports this module)

    grid = np.asarray(n_q_grid, dtype=float)
    if len(grid) < 3:
        raise ValueError("calibration grid needs at least 3 densities")
    if replicates < 3:
        raise ValueError("calibration needs at least 3 replicates")
    return eta_calibration(config, grid, replicates, seed=seed, jobs=jobs)
