"""Lorentzian, Gaussian, exponential and parabola fits with covariance estimates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from chargenoise.errors import FitError
from chargenoise.fitting.lm import covariance, levenberg_marquardt

# Flag thresholds for single-sweep resonance fits.
MIN_DEPTH_SNR = 3.0
EDGE_FRACTION = 0.45
# Batch-level linewidth consistency: fits whose width is this factor away from
# the batch median have locked onto noise.
WIDTH_FACTOR = 3.0
WIDTH_MIN_BATCH = 20


@dataclass
class FitResult:
    params: dict[str, float]
    covariance: np.ndarray
    residual_rms: float
    converged: bool
    n_iter: int
    initial_residual_rms: float = np.nan
    flag: str = "ok"
    extra: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.params)

    def stderr(self, name: str) -> float:
        i = self.names.index(name)
        return float(np.sqrt(self.covariance[i, i]))

    def __getitem__(self, name: str) -> float:
        return self.params[name]


# --------------------------------------------------------------------------
# Lorentzian (single sweep resonance)

def _lorentz_parts(x, p):
    u = x - p[:, 0:1]
    h = p[:, 1:2] / 2
    den = u * u + h * h
    return u, h, den, h * h / den


def _dip_model(x, p):
    *_, L = _lorentz_parts(x, p)
    return p[:, 3:4] * (1 - p[:, 2:3] * L)


def _dip_jac(x, p):
    u, h, den, L = _lorentz_parts(x, p)
    dL_dxc = 2 * u * h * h / den**2
    dL_dg = h * u * u / den**2
    B, D = p[:, 3:4], p[:, 2:3]
    return np.stack([-B * D * dL_dxc, -B * D * dL_dg, -B * L, 1 - D * L], axis=-1)


def _peak_model(x, p):
    *_, L = _lorentz_parts(x, p)
    return p[:, 3:4] + p[:, 2:3] * L


def _peak_jac(x, p):
    u, h, den, L = _lorentz_parts(x, p)
    dL_dxc = 2 * u * h * h / den**2
    dL_dg = h * u * u / den**2
    a = p[:, 2:3]
    return np.stack([a * dL_dxc, a * dL_dg, L, np.ones_like(L)], axis=-1)


@dataclass
class LorentzianFits:
    """Column-wise results of fitting many sweeps over a shared window."""

    f_c: np.ndarray
    gamma: np.ndarray
    amplitude: np.ndarray
    baseline: np.ndarray
    covariance: np.ndarray
    residual_rms: np.ndarray
    initial_residual_rms: np.ndarray
    converged: np.ndarray
    n_iter: np.ndarray
    flags: np.ndarray
    detection: str

    @property
    def sigma_f_c(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.sqrt(self.covariance[:, 0, 0])

    def result(self, k: int) -> FitResult:
        amp_name = "depth" if self.detection == "transmission" else "amplitude"
        params = {"f_c": float(self.f_c[k]), "gamma": float(self.gamma[k]),
                  amp_name: float(self.amplitude[k]), "baseline": float(self.baseline[k])}
        return FitResult(params, self.covariance[k], float(self.residual_rms[k]),
                         bool(self.converged[k]), int(self.n_iter[k]),
                         float(self.initial_residual_rms[k]), str(self.flags[k]))


_KERNEL = np.array([1.0, 2.0, 3.0, 2.0, 1.0]) / 9.0


def _smooth(c: np.ndarray) -> np.ndarray:
    pad = np.concatenate([np.repeat(c[:, :1], 2, axis=1), c, np.repeat(c[:, -1:], 2, axis=1)], axis=1)
    n = c.shape[1]
    return sum(w * pad[:, i:i + n] for i, w in enumerate(_KERNEL))


def _lorentz_init(x, counts, detection):
    """Start values from the extremum bin and the half-maximum width."""
    step = (x[-1] - x[0]) / (len(x) - 1)
    sm = _smooth(counts)
    if detection == "transmission":
        base = np.median(counts, axis=1)
        k = np.argmin(sm, axis=1)
        excess = base[:, None] - sm
    else:
        base = np.percentile(counts, 10, axis=1)
        k = np.argmax(sm, axis=1)
        excess = sm - base[:, None]
    peak = excess[np.arange(len(k)), k]
    n_half = np.sum(excess > 0.5 * peak[:, None], axis=1)
    gamma0 = np.maximum(n_half, 1) * step
    safe = np.where(base > 0, base, 1.0)
    amp0 = peak / safe if detection == "transmission" else peak
    return np.column_stack([x[k], gamma0, amp0, base])


def fit_lorentzian_batch(freqs, counts, detection: str = "transmission",
                         max_iter: int = 100, xtol: float = 1e-8) -> LorentzianFits:
    """Poisson-weighted Lorentzian fits of every row of ``counts`` over ``freqs``.

    Frequencies are handled relative to the window centre so that the optimiser
    works with numbers of order the linewidth. Rows whose resonance ends up near
    the window edge, whose depth is not significant, or (in batches of at least
    ``WIDTH_MIN_BATCH``) whose width is off the batch median by more than
    ``WIDTH_FACTOR`` are flagged, not dropped.
    """
    freqs = np.asarray(freqs, dtype=float)
    counts = np.atleast_2d(np.asarray(counts, dtype=float))
    n_sw, n_bins = counts.shape
    if n_bins < 8:
        raise FitError("need at least 8 bins for a Lorentzian fit")
    if detection not in ("transmission", "fluorescence"):
        raise ValueError(f"unknown detection {detection!r}")
    center = 0.5 * (freqs[0] + freqs[-1])
    step = (freqs[-1] - freqs[0]) / (n_bins - 1)
    span = step * n_bins
    x = freqs - center

    featureless = np.ptp(counts, axis=1) == 0
    sigma = np.sqrt(np.maximum(counts, 1.0))
    p0 = _lorentz_init(x, counts, detection)
    model, jac = (_dip_model, _dip_jac) if detection == "transmission" else (_peak_model, _peak_jac)
    scale = np.column_stack([np.abs(p0[:, 1]), np.abs(p0[:, 1]), np.abs(p0[:, 2]) + 1e-12,
                             np.abs(p0[:, 3]) + 1.0])

    work = ~featureless
    p = np.full((n_sw, 4), np.nan)
    cost = np.full(n_sw, np.nan)
    cost0 = np.full(n_sw, np.nan)
    n_iter = np.zeros(n_sw, dtype=np.int64)
    conv = np.zeros(n_sw, dtype=bool)
    cov = np.full((n_sw, 4, 4), np.nan)
    if np.any(work):
        res = levenberg_marquardt(model, jac, x, counts[work], p0[work], sigma[work], scale[work],
                                  max_iter=max_iter, xtol=xtol)
        p[work] = res.params
        cost[work] = res.cost
        cost0[work] = res.initial_cost
        n_iter[work] = res.n_iter
        conv[work] = res.converged
        cov[work] = covariance(res.jtj)
    p[:, 1] = np.abs(p[:, 1])

    flags = np.full(n_sw, "ok", dtype=object)
    with np.errstate(invalid="ignore", divide="ignore"):
        snr = np.abs(p[:, 2]) / np.sqrt(cov[:, 2, 2])
        edge = np.abs(p[:, 0]) > EDGE_FRACTION * span
        low = ~(snr >= MIN_DEPTH_SNR)
        bad = ~conv | ~np.all(np.isfinite(p), axis=1)
    flags[low] = "low-snr"
    if n_sw >= WIDTH_MIN_BATCH and np.any(flags == "ok"):
        med = np.median(p[flags == "ok", 1])
        flags[(flags == "ok") & ((p[:, 1] > WIDTH_FACTOR * med) | (p[:, 1] < med / WIDTH_FACTOR))] = "width"
    flags[edge] = "edge"
    flags[bad] = "not-converged"
    flags[featureless] = "no-feature"
    return LorentzianFits(
        f_c=center + p[:, 0], gamma=p[:, 1], amplitude=p[:, 2], baseline=p[:, 3], covariance=cov,
        residual_rms=np.sqrt(cost / n_bins), initial_residual_rms=np.sqrt(cost0 / n_bins),
        converged=conv & (flags == "ok"), n_iter=n_iter, flags=flags, detection=detection)


def fit_lorentzian(record, detection: str = "transmission") -> FitResult:
    """Fit one sweep (anything with ``freqs`` and ``counts``)."""
    fits = fit_lorentzian_batch(record.freqs, np.asarray(record.counts)[None, :], detection)
    return fits.result(0)


# --------------------------------------------------------------------------
# Gaussian (histograms and profiles)

def _gauss_model(x, p):
    g = p[:, 2:3] * np.exp(-0.5 * ((x - p[:, 0:1]) / p[:, 1:2]) ** 2)
    return g + p[:, 3:4] if p.shape[1] == 4 else g


def _gauss_jac(x, p):
    u = x - p[:, 0:1]
    s = p[:, 1:2]
    e = np.exp(-0.5 * (u / s) ** 2)
    g = p[:, 2:3] * e
    cols = [g * u / s**2, g * u * u / s**3, e]
    if p.shape[1] == 4:
        cols.append(np.ones_like(e))
    return np.stack(cols, axis=-1)


def gaussian(x, mu: float, sigma: float, amplitude: float, offset: float = 0.0):
    return amplitude * np.exp(-0.5 * ((np.asarray(x, dtype=float) - mu) / sigma) ** 2) + offset


def fit_gaussian(centers, counts, offset: bool = False, max_iter: int = 100) -> FitResult:
    """Least-squares Gaussian ``amplitude * exp(-(x-mu)^2 / 2 sigma^2)`` on binned data.

    Starts from the weighted mean and standard deviation of the bins. With
    ``offset=True`` a constant background is fitted as well.
    """
    x = np.asarray(centers, dtype=float)
    y = np.asarray(counts, dtype=float)
    if np.count_nonzero(y) < 5:
        raise FitError("Gaussian fit needs at least 5 nonzero bins")
    base = float(np.min(y)) if offset else 0.0
    w = np.clip(y - base, 0, None)
    if w.sum() <= 0:
        raise FitError("no positive signal to fit")
    mu0 = float(np.sum(w * x) / w.sum())
    sd0 = float(np.sqrt(np.sum(w * (x - mu0) ** 2) / w.sum()))
    if sd0 == 0:
        sd0 = float(np.min(np.diff(np.unique(x)))) if len(np.unique(x)) > 1 else 1.0
    amp0 = float(np.max(y) - base)
    p0 = [mu0, sd0, amp0] + ([base] if offset else [])
    scale = np.array([sd0, sd0, amp0, amp0][: len(p0)])
    res = levenberg_marquardt(_gauss_model, _gauss_jac, x, y[None, :], np.array([p0]), scale=scale,
                              max_iter=max_iter)
    p = res.params[0]
    dof = max(len(x) - len(p0), 1)
    cov = covariance(res.jtj, res.cost / dof)[0]
    names = ["mu", "sigma", "amplitude"] + (["offset"] if offset else [])
    params = dict(zip(names, map(float, p)))
    params["sigma"] = abs(params["sigma"])
    conv = bool(res.converged[0]) and np.all(np.isfinite(p))
    return FitResult(params, cov, float(np.sqrt(res.cost[0] / len(x))), conv, int(res.n_iter[0]),
                     float(np.sqrt(res.initial_cost[0] / len(x))), "ok" if conv else "not-converged")


# --------------------------------------------------------------------------
# Exponential decay (correlation curves)

def _exp_model(x, p):
    return p[:, 0:1] * np.exp(-x / p[:, 1:2])


def _exp_jac(x, p):
    e = np.exp(-x / p[:, 1:2])
    return np.stack([e, p[:, 0:1] * e * x / p[:, 1:2] ** 2], axis=-1)


def fit_exponential(lags, values, exclude_zero_lag: bool = True, max_iter: int = 100) -> FitResult:
    """Fit ``amplitude * exp(-lag / tau)``; the zero lag is dropped by default.

    Non-decaying data (tau beyond 100 times the largest lag) are reported with
    ``converged=False``.
    """
    t = np.asarray(lags, dtype=float)
    v = np.asarray(values, dtype=float)
    if exclude_zero_lag:
        keep = t != 0
        t, v = t[keep], v[keep]
    if len(t) < 4:
        raise FitError("exponential fit needs at least 4 lag points")
    pos = v > 0
    if np.count_nonzero(pos) >= 2:
        slope, icpt = np.polyfit(t[pos][:8], np.log(v[pos][:8]), 1)
        tau0 = -1 / slope if slope < 0 else 10 * t.max()
        amp0 = float(np.exp(icpt))
    else:
        tau0, amp0 = float(t.max()), float(np.max(np.abs(v))) or 1.0
    p0 = np.array([[amp0, tau0]])
    res = levenberg_marquardt(_exp_model, _exp_jac, t, v[None, :], p0, scale=np.array([abs(amp0), t.max()]),
                              max_iter=max_iter)
    amp, tau = map(float, res.params[0])
    dof = max(len(t) - 2, 1)
    cov = covariance(res.jtj, res.cost / dof)[0]
    ok = bool(res.converged[0]) and np.isfinite(tau) and 0 < tau <= 100 * t.max()
    flag = "ok" if ok else ("non-decaying" if np.isfinite(tau) and (tau <= 0 or tau > 100 * t.max())
                            else "not-converged")
    return FitResult({"amplitude": amp, "tau": tau}, cov, float(np.sqrt(res.cost[0] / len(t))), ok,
                     int(res.n_iter[0]), float(np.sqrt(res.initial_cost[0] / len(t))), flag)


# --------------------------------------------------------------------------
# Parabola (Stark tuning curves)

@dataclass
class ParabolaFit(FitResult):
    def tunability(self, V):
        """Slope dF/dV of the fitted parabola."""
        return 2 * self.params["a"] * np.asarray(V, dtype=float) + self.params["b"]

    @property
    def vertex(self) -> float:
        return -self.params["b"] / (2 * self.params["a"])

    def __call__(self, V):
        V = np.asarray(V, dtype=float)
        return self.params["a"] * V**2 + self.params["b"] * V + self.params["c"]


def fit_parabola(V, f, weights=None) -> ParabolaFit:
    """Closed-form weighted least squares for ``a V^2 + b V + c``.

    ``weights`` are inverse variances. The covariance is scaled by the reduced
    chi-square when there are spare degrees of freedom.
    """
    V = np.asarray(V, dtype=float)
    f = np.asarray(f, dtype=float)
    w = np.ones_like(V) if weights is None else np.asarray(weights, dtype=float)
    if len(np.unique(V)) < 3:
        raise FitError("parabola fit needs at least 3 distinct voltages")
    X = np.column_stack([V**2, V, np.ones_like(V)])
    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    if np.linalg.matrix_rank(Xw) < 3:
        raise FitError("rank-deficient design for parabola fit")
    # Centre f before solving: Stark shifts ride on ~4e14 Hz.
    f_ref = float(np.average(f, weights=w))
    coef, *_ = np.linalg.lstsq(Xw, (f - f_ref) * sw, rcond=None)
    coef[2] += f_ref
    resid = (f - X @ coef) * sw
    dof = len(V) - 3
    s2 = float(resid @ resid / dof) if dof > 0 else 1.0
    cov = np.linalg.inv(Xw.T @ Xw) * s2
    rms = float(np.sqrt(np.mean(resid**2)))
    init = float(np.sqrt(np.mean(((f - f_ref) * sw) ** 2)))
    return ParabolaFit(dict(zip("abc", map(float, coef))), cov, rms, True, 1, init)
