"""Electrostatics of the nanoguide and the quadratic Stark map of a molecule.

Coordinates: the nanoguide axis runs along x, its width along y (in the chip
plane) and its height along z. The cross-section is centred on y = z = 0.
All quantities are SI: metres, volts per metre, hertz.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import constants

from chargenoise.errors import DegenerateGeometryError

ELEMENTARY_CHARGE = constants.e
VACUUM_PERMITTIVITY = constants.epsilon_0

# Vectors are plain float arrays of shape (3,).
Vec3 = np.ndarray


def vec3(values) -> Vec3:
    """Coerce to a finite float vector of length 3."""
    v = np.asarray(values, dtype=float)
    if v.shape != (3,):
        raise ValueError(f"expected 3 components, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite vector {v}")
    return v


@dataclass(frozen=True)
class NanoguideGeometry:
    """Rectangular nanoguide segment used as the charge volume."""

    width: float = 100e-9
    height: float = 160e-9
    segment_length: float = 2e-6
    epsilon_eff: float = 3.6
    center_x: float = 0.0

    def __post_init__(self):
        for name in ("width", "height", "segment_length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.epsilon_eff >= 1:
            raise ValueError("epsilon_eff must be >= 1")

    @property
    def volume(self) -> float:
        return self.width * self.height * self.segment_length

    @property
    def lower(self) -> Vec3:
        return np.array([self.center_x - self.segment_length / 2, -self.width / 2, -self.height / 2])

    @property
    def upper(self) -> Vec3:
        return np.array([self.center_x + self.segment_length / 2, self.width / 2, self.height / 2])

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.lower) & (p <= self.upper), axis=-1)


@dataclass(frozen=True)
class Charge:
    anchor: Vec3
    position: Vec3
    q: float = -1.0


@dataclass
class ChargeEnsemble:
    """Anchored point charges inside a nanoguide segment.

    Stored column-wise: ``anchors`` and ``positions`` are (N, 3) arrays and
    ``q`` holds signed charges in units of the elementary charge.
    """

    anchors: np.ndarray
    positions: np.ndarray
    q: np.ndarray
    n_q: float
    geometry: NanoguideGeometry
    seed: int | None = None

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=float).reshape(-1, 3)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        n = len(self.anchors)
        if self.positions.shape != (n, 3) or self.q.shape != (n,):
            raise ValueError("anchors, positions and q must describe the same charges")
        if n and not np.all(self.geometry.contains(self.anchors)):
            raise ValueError("all anchors must lie inside the nanoguide volume")

    def __len__(self) -> int:
        return len(self.anchors)

    def __getitem__(self, i: int) -> Charge:
        return Charge(self.anchors[i].copy(), self.positions[i].copy(), float(self.q[i]))

    @property
    def charges(self) -> list[Charge]:
        return [self[i] for i in range(len(self))]

    @property
    def volume(self) -> float:
        return self.geometry.volume

    def with_positions(self, positions) -> ChargeEnsemble:
        return ChargeEnsemble(self.anchors, np.array(positions, dtype=float), self.q,
                              self.n_q, self.geometry, self.seed)

    def subset(self, mask) -> ChargeEnsemble:
        return ChargeEnsemble(self.anchors[mask], self.positions[mask], self.q[mask],
                              self.n_q, self.geometry, self.seed)

    @classmethod
    def empty(cls, geometry: NanoguideGeometry | None = None) -> ChargeEnsemble:
        geometry = geometry or NanoguideGeometry()
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), 0.0, geometry)

    @classmethod
    def union(cls, a: ChargeEnsemble, b: ChargeEnsemble) -> ChargeEnsemble:
        return cls(np.vstack([a.anchors, b.anchors]), np.vstack([a.positions, b.positions]),
                   np.concatenate([a.q, b.q]), a.n_q + b.n_q, a.geometry)


@dataclass(frozen=True)
class BiasField:
    """Static field at the probe: strain term plus the electrode term ``g * V * u_hat``."""

    E_cr: Vec3 = field(default_factory=lambda: np.zeros(3))
    g: float = 1e4
    u_hat: Vec3 = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        object.__setattr__(self, "E_cr", vec3(self.E_cr))
        u = vec3(self.u_hat)
        if not np.isclose(np.linalg.norm(u), 1.0, rtol=0, atol=1e-12):
            raise ValueError("u_hat must be a unit vector")
        object.__setattr__(self, "u_hat", u)
        if not self.g >= 0:
            raise ValueError("electrode gain g must be >= 0")


@dataclass(frozen=True)
class MoleculeProbe:
    position: Vec3
    f0: float = 402e12
    A: float = 8.33e-3
    gamma: float = 30e6
    D: float = 0.13
    name: str = "M1"

    def __post_init__(self):
        object.__setattr__(self, "position", vec3(self.position))
        if not self.gamma > 0:
            raise ValueError("linewidth gamma must be positive")
        if not 0 <= self.D <= 1:
            raise ValueError("extinction depth D must lie in [0, 1]")
        if not self.A > 0:
            raise ValueError("Stark coefficient A must be positive")


def coulomb_prefactor(epsilon_eff: float) -> float:
    """Field magnitude times r**2 of one elementary charge, in V m."""
    if not epsilon_eff >= 1:
        raise ValueError("epsilon_eff must be >= 1")
    return ELEMENTARY_CHARGE / (4 * np.pi * VACUUM_PERMITTIVITY * epsilon_eff)


def coulomb_fields(q, sources, point, epsilon_eff: float) -> np.ndarray:
    """Per-source Coulomb fields at ``point``; ``sources`` is (..., 3), result has the same shape."""
    r = np.asarray(point, dtype=float) - np.asarray(sources, dtype=float)
    r2 = np.einsum("...i,...i->...", r, r)
    if np.any(r2 == 0):
        raise DegenerateGeometryError("field evaluated at the position of a charge")
    scale = coulomb_prefactor(epsilon_eff) * np.asarray(q, dtype=float) / (r2 * np.sqrt(r2))
    return r * scale[..., None]


def coulomb_field(q: float, source, point, epsilon_eff: float = 3.6) -> Vec3:
    """Field (V/m) at ``point`` of a point charge ``q`` (elementary charges) at ``source``."""
    return coulomb_fields(np.asarray(q, dtype=float), vec3(source), vec3(point), epsilon_eff)


def nanoguide_field(ensemble: ChargeEnsemble, point) -> Vec3:
    """Superposed field of all charges at their current positions."""
    if len(ensemble) == 0:
        return np.zeros(3)
    return coulomb_fields(ensemble.q, ensemble.positions, vec3(point),
                          ensemble.geometry.epsilon_eff).sum(axis=0)


def electrode_field(bias: BiasField, V: float) -> Vec3:
    return bias.g * V * bias.u_hat


def stark_shift(E_total, A: float) -> float:
    """Quadratic Stark shift in Hz; negative for increasing field."""
    E = np.asarray(E_total, dtype=float)
    return -A * np.einsum("...i,...i->...", E, E)


def static_field(bias: BiasField, V: float) -> Vec3:
    return bias.E_cr + electrode_field(bias, V)


def resonance_frequency(probe: MoleculeProbe, ensemble: ChargeEnsemble, bias: BiasField, V: float) -> float:
    E = static_field(bias, V) + nanoguide_field(ensemble, probe.position)
    return probe.f0 + float(stark_shift(E, probe.A))


def analytic_tunability(probe: MoleculeProbe, bias: BiasField, V: float, mean_E_ng=None) -> float:
    """Exact dF/dV (Hz/V) at fixed nanoguide field."""
    E_ng = np.zeros(3) if mean_E_ng is None else vec3(mean_E_ng)
    E = static_field(bias, V) + E_ng
    return float(-2 * probe.A * bias.g * np.dot(bias.u_hat, E))


def vertex_voltage(bias: BiasField, E_ng=None) -> float:
    """Voltage at which the Stark parabola has its turning point."""
    if bias.g == 0:
        raise ValueError("vertex undefined for zero electrode gain")
    E = bias.E_cr if E_ng is None else bias.E_cr + vec3(E_ng)
    return float(-np.dot(bias.u_hat, E) / bias.g)


def sample_ensemble(n_q: float, geometry: NanoguideGeometry | None = None, seed: int = 0) -> ChargeEnsemble:
    """Draw ``round(n_q * volume)`` monovalent charges uniformly in the segment.

    Anchors and signs come from independent child streams of ``seed`` and are
    drawn sequentially, so for a fixed seed a lower-density ensemble is a
    prefix of a higher-density one.
    """
    if not n_q >= 0:
        raise ValueError("n_q must be >= 0")
    geometry = geometry or NanoguideGeometry()
    n = int(round(n_q * geometry.volume))
    anchor_ss, sign_ss = np.random.SeedSequence(seed).spawn(2)
    unit = np.random.default_rng(anchor_ss).random((n, 3))
    anchors = geometry.lower + unit * (geometry.upper - geometry.lower)
    signs = np.where(np.random.default_rng(sign_ss).random(n) < 0.5, -1.0, 1.0)
    return ChargeEnsemble(anchors, anchors.copy(), signs, float(n_q), geometry, seed)


def geometry_for_probes(base: NanoguideGeometry, probe_positions) -> NanoguideGeometry:
    """Segment centred on the probes' mean axial position and stretched to cover all of them."""
    xs = np.atleast_2d(probe_positions)[:, 0]
    spread = float(xs.max() - xs.min())
    return NanoguideGeometry(base.width, base.height, base.segment_length + spread,
                             base.epsilon_eff, center_x=float(xs.min() + spread / 2))
