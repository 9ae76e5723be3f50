from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chargenoise.dynamics import IlluminationConfig, JumpModel, simulate
from chargenoise.errors import FitError
from chargenoise.fitting import (
    fit_exponential,
    fit_gaussian,
    fit_lorentzian,
    fit_lorentzian_batch,
    fit_parabola,
    gaussian,
)
from chargenoise.model import BiasField, ChargeEnsemble, MoleculeProbe, analytic_tunability, resonance_frequency
from chargenoise.spectro import SweepConfig, lineshape, synthesize_campaign

GAMMA, DEPTH = 30e6, 0.13
FREQS = np.linspace(-0.5e9, 0.5e9, 200)


def _dip(f_c, flux_per_bin=1000.0, freqs=FREQS, detection="transmission"):
    return flux_per_bin * lineshape(freqs, f_c, GAMMA, DEPTH, detection)


# ---------------------------------------------------------------- Lorentzian

@pytest.mark.parametrize("f_c", [0.0, 37.5e6, -120e6])
def test_lorentzian_noiseless_roundtrip(f_c):
    fit = fit_lorentzian_batch(FREQS, _dip(f_c)).result(0)
    assert fit.flag == "ok" and fit.converged
    assert fit["f_c"] - f_c == pytest.approx(0.0, abs=1e-6 * GAMMA)
    assert fit["gamma"] == pytest.approx(GAMMA, rel=1e-6)
    assert fit["depth"] == pytest.approx(DEPTH, rel=1e-6)
    assert fit["baseline"] == pytest.approx(1000.0, rel=1e-6)


def test_fluorescence_peak_roundtrip():
    counts = 50.0 + 400.0 * lineshape(FREQS, 20e6, GAMMA, detection="fluorescence")
    fit = fit_lorentzian_batch(FREQS, counts, "fluorescence").result(0)
    assert fit["f_c"] == pytest.approx(20e6, rel=1e-6)
    assert fit["amplitude"] == pytest.approx(400.0, rel=1e-6)
    assert fit["baseline"] == pytest.approx(50.0, rel=1e-6)


def test_fit_scatter_at_3e7_is_4MHz_scale():
    # 1000 charge-free sweeps with the default window at detector flux 3e7.
    probe = MoleculeProbe(np.array([0.0, 150e-9, 0.0]))
    ens = ChargeEnsemble.empty()
    cfg = SweepConfig(detector_flux=3e7, n_sweeps=1000)
    trace = simulate(ens, IlluminationConfig(0.0), JumpModel(), 101.0, 0)
    batch = synthesize_campaign(probe, ens, trace, BiasField(), 20.0, cfg, seed=7)[0]
    fits = fit_lorentzian_batch(batch.freqs, batch.counts)
    ok = fits.flags == "ok"
    assert ok.mean() > 0.95
    rms = np.std(fits.f_c[ok])
    assert 2e6 <= rms <= 6e6, f"f_c scatter {rms / 1e6:.2f} MHz"


def test_edge_resonance_is_flagged():
    fits = fit_lorentzian_batch(FREQS, _dip(0.49e9))
    assert fits.flags[0] == "edge" and not fits.converged[0]


def test_constant_counts_are_no_feature():
    fits = fit_lorentzian_batch(FREQS, np.full(200, 321.0))
    assert fits.flags[0] == "no-feature" and not fits.converged[0]


def test_noise_only_is_low_snr(rng):
    fits = fit_lorentzian_batch(FREQS, rng.poisson(100.0, (5, 200)))
    assert not np.any(fits.flags == "ok")


def test_too_few_bins_raise():
    with pytest.raises(FitError):
        fit_lorentzian_batch(FREQS[:7], _dip(0.0, freqs=FREQS[:7]))


def test_batch_equals_single_fits(rng):
    counts = rng.poisson(_dip(10e6, 400.0)[None, :].repeat(6, axis=0))
    batch = fit_lorentzian_batch(FREQS, counts)

    class Rec:
        freqs = FREQS

    for k in range(6):
        rec = Rec()
        rec.counts = counts[k]
        assert fit_lorentzian(rec)["f_c"] == pytest.approx(batch.f_c[k], rel=1e-12, abs=1e-3)


@given(shift=st.floats(-1e9, 1e9), seed=st.integers(0, 10_000))
def test_lorentzian_shift_equivariance(shift, seed):
    counts = np.random.default_rng(seed).poisson(_dip(15e6, 500.0)).astype(float)
    a = fit_lorentzian_batch(FREQS, counts)
    b = fit_lorentzian_batch(FREQS + shift, counts)
    assert b.f_c[0] - shift == pytest.approx(a.f_c[0], abs=1.0)
    assert b.gamma[0] == pytest.approx(a.gamma[0], rel=1e-6)


@given(seed=st.integers(0, 10_000))
def test_lorentzian_descent(seed):
    counts = np.random.default_rng(seed).poisson(_dip(-40e6, 300.0))
    fits = fit_lorentzian_batch(FREQS, counts)
    assert fits.residual_rms[0] <= fits.initial_residual_rms[0]


def test_lorentzian_covariance_shrinks_as_one_over_n():
    rng = np.random.default_rng(3)
    var = {}
    for n in (1, 4, 16):
        freqs = np.repeat(FREQS, n)
        counts = rng.poisson(_dip(0.0, 20_000.0, freqs))
        fits = fit_lorentzian_batch(freqs, counts)
        var[n] = fits.covariance[0, 0, 0]
    assert var[1] / var[4] == pytest.approx(4, rel=0.2)
    assert var[1] / var[16] == pytest.approx(16, rel=0.2)


def test_lorentzian_covariance_is_psd(rng):
    fits = fit_lorentzian_batch(FREQS, rng.poisson(_dip(0.0, 800.0)))
    cov = fits.covariance[0]
    np.testing.assert_allclose(cov, cov.T, rtol=1e-10, atol=0)
    assert np.all(np.linalg.eigvalsh(cov) >= -1e-12 * np.abs(cov).max())


def test_lorentzian_deterministic(rng):
    counts = rng.poisson(_dip(0.0, 500.0, FREQS)[None, :].repeat(4, axis=0))
    a, b = fit_lorentzian_batch(FREQS, counts), fit_lorentzian_batch(FREQS, counts)
    assert np.array_equal(a.f_c, b.f_c) and np.array_equal(a.covariance, b.covariance, equal_nan=True)


# ---------------------------------------------------------------- Gaussian

X = np.linspace(-10, 10, 41)


def test_gaussian_roundtrip():
    fit = fit_gaussian(X, gaussian(X, 0.7, 2.3, 150.0))
    assert fit.converged
    for name, value in (("mu", 0.7), ("sigma", 2.3), ("amplitude", 150.0)):
        assert fit[name] == pytest.approx(value, rel=1e-6)


def test_gaussian_with_offset_roundtrip():
    fit = fit_gaussian(X, gaussian(X, -1.0, 1.8, 90.0, 5.0), offset=True)
    assert fit["offset"] == pytest.approx(5.0, rel=1e-6)
    assert fit["sigma"] == pytest.approx(1.8, rel=1e-6)


@given(width=st.floats(0.5, 5.0), seed=st.integers(0, 1000))
def test_gaussian_symmetric_input_centres(width, seed):
    y = np.random.default_rng(seed).uniform(0.5, 1.5, 21)
    y = (y + y[::-1]) * gaussian(X[10:31], 0.0, width, 100.0)
    fit = fit_gaussian(X[10:31], y)
    assert fit["mu"] == pytest.approx(0.0, abs=1e-6 * width)


def test_heavy_tails_underestimate_sample_std():
    samples = np.random.default_rng(8).laplace(0.0, 1.0, 200_000)
    counts, edges = np.histogram(samples, bins=np.linspace(-8, 8, 81))
    fit = fit_gaussian(0.5 * (edges[1:] + edges[:-1]), counts)
    assert fit["sigma"] < 0.9 * samples.std()


def test_gaussian_needs_five_bins():
    y = np.zeros_like(X)
    y[18:22] = [1, 4, 4, 1]
    with pytest.raises(FitError):
        fit_gaussian(X, y)


@given(seed=st.integers(0, 10_000))
def test_gaussian_descent(seed):
    y = np.random.default_rng(seed).poisson(gaussian(X, 0.3, 2.0, 80.0))
    fit = fit_gaussian(X, y)
    assert fit.residual_rms <= fit.initial_residual_rms + 1e-12


def test_gaussian_covariance_shrinks_as_one_over_n():
    rng = np.random.default_rng(9)
    var = {}
    for n in (1, 4, 16):
        xs = np.repeat(X, n)
        y = gaussian(xs, 0.0, 2.0, 100.0) + rng.normal(0, 2.0, xs.size)
        var[n] = fit_gaussian(xs, y).covariance[0, 0]
    assert var[1] / var[4] == pytest.approx(4, rel=0.35)
    assert var[1] / var[16] == pytest.approx(16, rel=0.35)


# ---------------------------------------------------------------- exponential

LAGS = np.arange(0, 40) * 0.1


def test_exponential_roundtrip():
    fit = fit_exponential(LAGS, np.exp(-LAGS / 1.0))
    assert fit.converged
    assert fit["tau"] == pytest.approx(1.0, rel=1e-6)
    assert fit["amplitude"] == pytest.approx(1.0, rel=1e-6)


@given(c=st.floats(1e-6, 1e6))
def test_exponential_scale_invariance(c):
    fit = fit_exponential(LAGS, c * np.exp(-LAGS / 0.7))
    assert fit["tau"] == pytest.approx(0.7, rel=1e-6)


def test_zero_lag_spike_exclusion():
    # Ornstein-Uhlenbeck process plus white fit noise, sampled every 0.1 s.
    rng = np.random.default_rng(21)
    n, dt, tau = 200_000, 0.1, 1.0
    a = np.exp(-dt / tau)
    x = np.empty(n)
    x[0] = 0.0
    kicks = rng.normal(0, np.sqrt(1 - a * a), n)
    for i in range(1, n):
        x[i] = a * x[i - 1] + kicks[i]
    y = x + rng.normal(0, 0.8, n)
    y -= y.mean()
    c = np.array([y[: n - k] @ y[k:] / n for k in range(len(LAGS))])
    c /= c[0]
    excl = fit_exponential(LAGS, c)
    incl = fit_exponential(LAGS, c, exclude_zero_lag=False)
    assert excl["tau"] == pytest.approx(tau, rel=0.1)
    assert incl["tau"] < excl["tau"]


def test_non_decaying_is_not_converged():
    fit = fit_exponential(LAGS, np.ones_like(LAGS) + 1e-4 * np.sin(LAGS))
    assert not fit.converged


def test_exponential_needs_four_points():
    with pytest.raises(FitError):
        fit_exponential(LAGS[:4], np.exp(-LAGS[:4]))


@given(seed=st.integers(0, 10_000))
def test_exponential_descent(seed):
    v = np.exp(-LAGS / 0.5) + np.random.default_rng(seed).normal(0, 0.01, LAGS.size)
    fit = fit_exponential(LAGS, v)
    assert fit.residual_rms <= fit.initial_residual_rms + 1e-12


# ---------------------------------------------------------------- parabola

VOLTS = np.linspace(-30, 30, 25)


def test_parabola_roundtrip():
    f = 4.1e14 - 2.5e5 * VOLTS**2 + 3e6 * VOLTS + 7e6
    fit = fit_parabola(VOLTS, f)
    assert fit["a"] == pytest.approx(-2.5e5, rel=1e-6)
    assert fit["b"] == pytest.approx(3e6, rel=1e-6)
    assert fit["c"] == pytest.approx(4.1e14 + 7e6, rel=1e-12)


def test_pure_quadratic_vertex_at_zero():
    fit = fit_parabola(VOLTS, 3.0 * VOLTS**2 + 1.0)
    assert fit.vertex == pytest.approx(0.0, abs=1e-9)


def test_parabola_rank_deficient():
    with pytest.raises(FitError):
        fit_parabola([1.0, 1.0, 2.0, 2.0], [0.0, 0.0, 1.0, 1.0])
    with pytest.raises(FitError):
        fit_parabola([0.0, 1.0, 2.0], [0.0, 1.0, 4.0], weights=[1.0, 0.0, 0.0])


def test_parabola_tunability_matches_analytic():
    probe = MoleculeProbe(np.array([0.0, 150e-9, 0.0]))
    bias = BiasField(E_cr=(1e4, 0.0, -5e4))
    f = [resonance_frequency(probe, ChargeEnsemble.empty(), bias, v) for v in VOLTS]
    fit = fit_parabola(VOLTS, f)
    exact = np.array([analytic_tunability(probe, bias, v) for v in VOLTS])
    np.testing.assert_allclose(fit.tunability(VOLTS), exact, rtol=1e-5, atol=1e-5 * np.abs(exact).max())
    # |tunability| is linear on either side of the vertex.
    side = VOLTS > fit.vertex + 1
    slope, icpt = np.polyfit(VOLTS[side], np.abs(fit.tunability(VOLTS[side])), 1)
    assert np.allclose(np.abs(fit.tunability(VOLTS[side])), slope * VOLTS[side] + icpt, rtol=1e-9)


@given(seed=st.integers(0, 10_000))
def test_parabola_descent_and_determinism(seed):
    f = 2e5 * VOLTS**2 + np.random.default_rng(seed).normal(0, 1e6, VOLTS.size)
    a, b = fit_parabola(VOLTS, f), fit_parabola(VOLTS, f)
    assert a.residual_rms <= a.initial_residual_rms
    assert a.params == b.params
