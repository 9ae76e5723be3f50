from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

from chargenoise.errors import DegenerateGeometryError
from chargenoise.model import (
    BiasField,
    ChargeEnsemble,
    MoleculeProbe,
    NanoguideGeometry,
    analytic_tunability,
    coulomb_field,
    electrode_field,
    nanoguide_field,
    resonance_frequency,
    sample_ensemble,
    stark_shift,
    vertex_voltage,
)

# Frozen oracle: e / (4 pi eps0 * 3.6 * r^2) with CODATA 2018 constants typed in by hand.
E_100NM = 39999.01521784909
E_50NM = 159996.06087139636

finite = st.floats(-1e6, 1e6, allow_nan=False)
vectors = st.tuples(finite, finite, finite).map(np.array)


def _ensemble(anchors, q, geometry=None):
    anchors = np.asarray(anchors, dtype=float)
    return ChargeEnsemble(anchors, anchors.copy(), np.asarray(q, dtype=float), 0.0,
                          geometry or NanoguideGeometry())


# ---------------------------------------------------------------- coulomb_field

def test_single_electron_at_100nm_is_40kV_per_m():
    E = coulomb_field(-1, [0, 0, 0], [0, 100e-9, 0], 3.6)
    assert np.linalg.norm(E) == pytest.approx(4.0e4, rel=0.01)
    assert np.linalg.norm(E) == pytest.approx(E_100NM, rel=1e-6)


def test_electron_field_points_towards_it():
    E = coulomb_field(-1, [0, 0, 0], [0, 100e-9, 0], 3.6)
    assert E[1] < 0 and E[0] == 0 and E[2] == 0


def test_zero_charge_gives_zero_field():
    assert np.array_equal(coulomb_field(0, [0, 0, 0], [1e-7, 0, 0]), np.zeros(3))


def test_electron_at_50nm():
    E = coulomb_field(-1, [0, 0, 0], [0, 0, 50e-9], 3.6)
    assert np.linalg.norm(E) == pytest.approx(1.6e5, rel=0.01)
    assert np.linalg.norm(E) == pytest.approx(E_50NM, rel=1e-6)


def test_coincident_points_raise():
    with pytest.raises(DegenerateGeometryError):
        coulomb_field(1, [1e-9, 0, 0], [1e-9, 0, 0])


@given(r=st.floats(1e-9, 1e-5), direction=vectors.filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_coulomb_inverse_square(r, direction):
    u = direction / np.linalg.norm(direction)
    e1 = np.linalg.norm(coulomb_field(1, np.zeros(3), r * u))
    e2 = np.linalg.norm(coulomb_field(1, np.zeros(3), 2 * r * u))
    assert e2 == pytest.approx(e1 / 4, rel=1e-12)


# ---------------------------------------------------------------- nanoguide_field

def test_empty_ensemble_gives_zero():
    assert np.array_equal(nanoguide_field(ChargeEnsemble.empty(), [0, 1e-7, 0]), np.zeros(3))


def test_mirror_pair_cancels_along_axis():
    ens = _ensemble([[-30e-9, 0, 0], [30e-9, 0, 0]], [1, 1])
    E = nanoguide_field(ens, [0, 0, 0])
    assert abs(E[0]) < 1e-9 * np.abs(coulomb_field(1, [30e-9, 0, 0], [0, 0, 0])).max()


def test_random_ensemble_equals_brute_force_sum(rng):
    ens = sample_ensemble(50 / NanoguideGeometry().volume, seed=7)
    assert len(ens) == 50
    point = np.array([0.0, 150e-9, 10e-9])
    brute = np.zeros(3)
    for c in ens.charges:
        brute += coulomb_field(c.q, c.position, point, 3.6)
    np.testing.assert_allclose(nanoguide_field(ens, point), brute, rtol=1e-12, atol=1e-9)


@given(seed_a=st.integers(0, 2**31), seed_b=st.integers(0, 2**31))
def test_superposition_of_disjoint_ensembles(seed_a, seed_b):
    a = sample_ensemble(5e21, seed=seed_a)
    b = sample_ensemble(5e21, seed=seed_b)
    point = np.array([0.0, 200e-9, 0.0])
    both = nanoguide_field(ChargeEnsemble.union(a, b), point)
    np.testing.assert_allclose(both, nanoguide_field(a, point) + nanoguide_field(b, point),
                               rtol=1e-9, atol=1e-9)


# ---------------------------------------------------------------- electrode and stark

def test_electrode_field_examples():
    bias = BiasField(g=1e4)
    assert np.array_equal(electrode_field(bias, 0.0), np.zeros(3))
    np.testing.assert_allclose(electrode_field(bias, 10.0), 1e5 * bias.u_hat)
    np.testing.assert_allclose(electrode_field(bias, -10.0), -electrode_field(bias, 10.0))


def test_bias_requires_unit_vector():
    with pytest.raises(ValueError):
        BiasField(u_hat=(0, 0, 2))


def test_stark_zero_field():
    assert stark_shift(np.zeros(3), 1e-2) == 0


@given(E=vectors, angle=st.floats(0, 2 * np.pi))
def test_stark_rotation_invariance(E, angle):
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    assert stark_shift(R @ E, 8.33e-3) == pytest.approx(stark_shift(E, 8.33e-3), rel=1e-9, abs=1e-9)


def test_stark_cross_term_amplification():
    # First-order expansion of |E_cr + dE|^2 for dE parallel to E_cr.
    A = 8.33e-3
    E_cr = np.array([0.0, 0.0, 3e5])
    dE = np.array([0.0, 0.0, 10.0])
    exact = stark_shift(E_cr + dE, A) - stark_shift(E_cr, A)
    first_order = -2 * A * np.linalg.norm(E_cr) * np.linalg.norm(dE)
    assert exact == pytest.approx(first_order, rel=1e-4)


# ---------------------------------------------------------------- resonance and tunability

PROBE = MoleculeProbe(np.array([0.0, 150e-9, 0.0]))


def test_resonance_without_fields_is_f0():
    assert resonance_frequency(PROBE, ChargeEnsemble.empty(), BiasField(), 0.0) == PROBE.f0


def test_resonance_is_exactly_quadratic_without_strain():
    bias = BiasField()
    V = np.linspace(-30, 30, 13)
    shift = np.array([resonance_frequency(PROBE, ChargeEnsemble.empty(), bias, v) - PROBE.f0 for v in V])
    np.testing.assert_allclose(shift, -PROBE.A * (bias.g * V) ** 2, rtol=1e-9)


def test_strain_moves_the_vertex():
    bias = BiasField(E_cr=(1e4, -2e4, -5e4))
    assert vertex_voltage(bias) == pytest.approx(5.0)
    V = np.linspace(-10, 20, 30001)
    f = [resonance_frequency(PROBE, ChargeEnsemble.empty(), bias, v) for v in V]
    assert V[int(np.argmax(f))] == pytest.approx(5.0, abs=1e-3)


@given(E_cr=vectors)
def test_vertex_invariance(E_cr):
    bias = BiasField(E_cr=E_cr)
    Vstar = vertex_voltage(bias)
    assert Vstar == pytest.approx(-np.dot(bias.u_hat, E_cr) / bias.g)
    # Turning point: |f - f0| is minimal at V*.
    f = lambda v: abs(resonance_frequency(PROBE, ChargeEnsemble.empty(), bias, v) - PROBE.f0)
    assert f(Vstar) <= min(f(Vstar - 0.5), f(Vstar + 0.5))


def test_tunability_zero_at_vertex():
    bias = BiasField(E_cr=(0, 0, -5e4))
    assert analytic_tunability(PROBE, bias, vertex_voltage(bias)) == pytest.approx(0.0, abs=1e-6)


def test_tunability_slope_is_constant():
    bias = BiasField(E_cr=(2e4, 0, -5e4))
    t = [analytic_tunability(PROBE, bias, v) for v in (-10.0, 0.0, 10.0, 25.0)]
    slopes = np.diff(t) / np.diff([-10.0, 0.0, 10.0, 25.0])
    np.testing.assert_allclose(slopes, -2 * PROBE.A * bias.g**2, rtol=1e-9)


def test_tunability_scale_at_30V():
    # Default A and g are tuned for about 50 MHz/V at 30 V.
    assert abs(analytic_tunability(PROBE, BiasField(), 30.0)) == pytest.approx(50e6, rel=0.01)


@given(V=st.floats(-30, 30), seed=st.integers(0, 1000))
def test_tunability_matches_finite_difference(V, seed):
    # f0 only offsets the frequency; zero keeps the 1 mV difference well above roundoff.
    probe = MoleculeProbe(np.array([0.0, 150e-9, 0.0]), f0=0.0)
    bias = BiasField(E_cr=(1e4, 0, -5e4))
    ens = sample_ensemble(2.5e22, seed=seed)
    h = 1e-3
    fd = (resonance_frequency(probe, ens, bias, V + h) - resonance_frequency(probe, ens, bias, V - h)) / (2 * h)
    exact = analytic_tunability(probe, bias, V, nanoguide_field(ens, probe.position))
    assert fd == pytest.approx(exact, rel=1e-6, abs=1.0)


# ---------------------------------------------------------------- sample_ensemble

def test_fifty_charges_in_reference_volume():
    geom = NanoguideGeometry(segment_length=125e-9)
    assert geom.volume == pytest.approx(2e-21)
    assert len(sample_ensemble(2.5e22, geom, seed=1)) == 50


def test_one_charge_per_35nm_cube():
    n = 1 / (35e-9) ** 3
    assert round(n / 1e22, 2) == 2.33
    assert abs(n - 2.5e22) / 2.5e22 < 0.1


def test_zero_density_is_empty():
    assert len(sample_ensemble(0.0, seed=3)) == 0


def test_negative_density_rejected():
    with pytest.raises(ValueError):
        sample_ensemble(-1.0)


def test_ensemble_is_deterministic():
    a, b = sample_ensemble(2.5e22, seed=42), sample_ensemble(2.5e22, seed=42)
    assert np.array_equal(a.anchors, b.anchors) and np.array_equal(a.q, b.q)
    assert np.array_equal(a.positions, a.anchors)


def test_ensemble_anchors_inside_volume_with_unit_charges():
    ens = sample_ensemble(2.5e22, seed=5)
    assert np.all(ens.geometry.contains(ens.anchors))
    assert set(np.unique(ens.q)) <= {-1.0, 1.0}


def test_lower_density_is_prefix_of_higher():
    lo, hi = sample_ensemble(1e22, seed=9), sample_ensemble(4e22, seed=9)
    assert np.array_equal(hi.anchors[: len(lo)], lo.anchors)


def test_ensemble_uniformity_over_octants():
    geom = NanoguideGeometry()
    ens = sample_ensemble(1e4 / geom.volume, geom, seed=2024)
    assert len(ens) == 10_000
    mid = (geom.lower + geom.upper) / 2
    octant = ((ens.anchors > mid) * np.array([1, 2, 4])).sum(axis=1)
    counts = np.bincount(octant, minlength=8)
    assert sps.chisquare(counts).pvalue > 0.01
    other = sample_ensemble(1e4 / geom.volume, geom, seed=2025)
    assert not np.array_equal(other.anchors, ens.anchors)


def test_geometry_validation():
    with pytest.raises(ValueError):
        NanoguideGeometry(width=0)
    with pytest.raises(ValueError):
        NanoguideGeometry(epsilon_eff=0.5)
    with pytest.raises(ValueError):
        MoleculeProbe(np.zeros(3), gamma=0)
    with pytest.raises(ValueError):
        MoleculeProbe(np.zeros(3), D=1.5)
