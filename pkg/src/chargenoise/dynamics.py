"""Kinetic Monte Carlo of photo-activated charge jumps.

Each charge jumps at a rate proportional to the local photon flux. A jump
places the charge on a sphere of radius ``d`` around its fixed anchor, so the
field process is stationary once every charge has jumped at least once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from chargenoise.model import ChargeEnsemble, coulomb_fields, vec3

_BLOCK = 1 << 16


@dataclass(frozen=True)
class AuxFocus:
    """Auxiliary Gaussian focus scanned along the guide."""

    center_x: float
    flux: float
    fwhm: float = 1e-6

    def __post_init__(self):
        if not self.flux >= 0:
            raise ValueError("aux flux must be >= 0")
        if not self.fwhm > 0:
            raise ValueError("fwhm must be positive")


@dataclass(frozen=True)
class IlluminationConfig:
    guided_flux: float
    kappa: float = 1.0 / 3e7
    aux_focus: AuxFocus | None = None

    def __post_init__(self):
        if not self.guided_flux >= 0:
            raise ValueError("guided_flux must be >= 0")
        if not self.kappa >= 0:
            raise ValueError("kappa must be >= 0")

    def scaled(self, factor: float) -> IlluminationConfig:
        aux = self.aux_focus
        if aux is not None:
            aux = AuxFocus(aux.center_x, aux.flux * factor, aux.fwhm)
        return IlluminationConfig(self.guided_flux * factor, self.kappa, aux)


@dataclass(frozen=True)
class JumpModel:
    d: float = 20e-9

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError("jump displacement d must be positive")


class Event(NamedTuple):
    t: float
    charge_index: int
    new_position: np.ndarray


@dataclass
class EventTrace:
    """Time-ordered jump events stored column-wise."""

    t: np.ndarray
    charge_index: np.ndarray
    new_position: np.ndarray
    duration: float
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.charge_index = np.asarray(self.charge_index, dtype=np.int64).reshape(-1)
        self.new_position = np.asarray(self.new_position, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.charge_index) == len(self.new_position)):
            raise ValueError("event columns differ in length")

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield Event(float(self.t[i]), int(self.charge_index[i]), self.new_position[i])

    @property
    def events(self) -> list[Event]:
        return list(self)

    def check(self, ensemble: ChargeEnsemble | None = None, d: float | None = None, rtol: float = 1e-9) -> None:
        """Raise ValueError if the trace violates its invariants."""
        if len(self.t):
            if np.any(np.diff(self.t) <= 0):
                raise ValueError("event times must be strictly increasing")
            if self.t[0] < 0 or self.t[-1] > self.duration:
                raise ValueError("event times outside [0, duration]")
        if ensemble is not None and d is not None and len(self.t):
            r = np.linalg.norm(self.new_position - ensemble.anchors[self.charge_index], axis=1)
            if np.any(np.abs(r - d) > rtol * d):
                raise ValueError("jump left the anchored sphere")


def local_flux(illum: IlluminationConfig, x):
    """Photon flux seen at axial position(s) ``x``."""
    x = np.asarray(x, dtype=float)
    flux = np.full(x.shape, float(illum.guided_flux))
    aux = illum.aux_focus
    if aux is not None:
        flux = flux + aux.flux * np.exp(-4 * np.log(2) * (x - aux.center_x) ** 2 / aux.fwhm**2)
    return flux if flux.ndim else float(flux)


def jump_rate(charge, illum: IlluminationConfig, kappa: float | None = None) -> float:
    """Activation rate (1/s) of one charge, evaluated at its anchor's axial position."""
    kappa = illum.kappa if kappa is None else kappa
    return kappa * local_flux(illum, float(charge.anchor[0]))


def jump_rates(ensemble: ChargeEnsemble, illum: IlluminationConfig) -> np.ndarray:
    # Rates are frozen at the anchors: a jump moves a charge by d << fwhm.
    return illum.kappa * np.asarray(local_flux(illum, ensemble.anchors[:, 0]), dtype=float)


def _streams(seed):
    wait_ss, pick_ss, dir_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(wait_ss), np.random.default_rng(pick_ss),
            np.random.default_rng(dir_ss))


def simulate(ensemble: ChargeEnsemble, illum: IlluminationConfig, jump_model: JumpModel,
             duration: float, seed: int = 0) -> EventTrace:
    """Gillespie simulation of charge jumps over ``[0, duration]``.

    Rates do not change between events, so the event chain is generated in
    blocks. Waiting times, charge choices and jump directions come from three
    separate streams consumed strictly in event order: the k-th event always
    uses the k-th draw of each stream. Scaling every rate by a constant therefore
    rescales event times and leaves the rest of the stream unchanged.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    params = {"kappa": illum.kappa, "guided_flux": illum.guided_flux, "d": jump_model.d,
              "n_charges": len(ensemble)}
    rates = jump_rates(ensemble, illum) if len(ensemble) else np.zeros(0)
    total = float(rates.sum())
    if total <= 0:
        return EventTrace(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, 3)),
                          duration, seed, params)

    cdf = np.cumsum(rates)
    wait_rng, pick_rng, dir_rng = _streams(seed)
    times, picks, dirs = [], [], []
    t_last = 0.0
    while True:
        dt = wait_rng.standard_exponential(_BLOCK) / total
        t_block = t_last + np.cumsum(dt)
        u = pick_rng.random(_BLOCK)
        g = dir_rng.standard_normal((_BLOCK, 3))
        keep = int(np.searchsorted(t_block, duration, side="right"))
        times.append(t_block[:keep])
        picks.append(np.minimum(np.searchsorted(cdf, u[:keep] * total, side="right"), len(cdf) - 1))
        dirs.append(g[:keep])
        if keep < _BLOCK:
            break
        t_last = float(t_block[-1])

    t = np.concatenate(times)
    idx = np.concatenate(picks).astype(np.int64)
    g = np.concatenate(dirs)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    new_pos = ensemble.anchors[idx] + jump_model.d * g
    return EventTrace(t, idx, new_pos, float(duration), seed, params)


def _last_event_per_charge(idx: np.ndarray, n: int) -> np.ndarray:
    """Index of the last event for every charge, -1 where it never jumped."""
    last = np.full(n, -1, dtype=np.int64)
    if len(idx):
        rev = idx[::-1]
        uniq, first_in_rev = np.unique(rev, return_index=True)
        last[uniq] = len(idx) - 1 - first_in_rev
    return last


def positions_at(ensemble: ChargeEnsemble, trace: EventTrace, t: float) -> np.ndarray:
    """Charge positions after replaying all events with time <= t."""
    if not 0 <= t <= trace.duration:
        raise ValueError(f"t={t} outside [0, {trace.duration}]")
    k = int(np.searchsorted(trace.t, t, side="right"))
    positions = ensemble.positions.copy()
    last = _last_event_per_charge(trace.charge_index[:k], len(ensemble))
    moved = last >= 0
    positions[moved] = trace.new_position[last[moved]]
    return positions


class TraceReplayer:
    """Incremental replay with a cursor; queries must be non-decreasing in time."""

    def __init__(self, ensemble: ChargeEnsemble, trace: EventTrace):
        self.ensemble = ensemble
        self.trace = trace
        self.positions = ensemble.positions.copy()
        self.cursor = 0
        self.t = 0.0

    def at(self, t: float) -> np.ndarray:
        if not 0 <= t <= self.trace.duration:
            raise ValueError(f"t={t} outside [0, {self.trace.duration}]")
        if t < self.t:
            raise ValueError("TraceReplayer queries must be monotone")
        k = int(np.searchsorted(self.trace.t, t, side="right"))
        if k > self.cursor:
            idx = self.trace.charge_index[self.cursor:k]
            last = _last_event_per_charge(idx, len(self.ensemble))
            moved = last >= 0
            self.positions[moved] = self.trace.new_position[self.cursor + last[moved]]
            self.cursor = k
        self.t = t
        return self.positions.copy()


@dataclass
class FieldTimeline:
    """Piecewise-constant nanoguide field at a fixed point.

    ``fields[0]`` holds before the first event and ``fields[k]`` after event k-1.
    """

    times: np.ndarray
    fields: np.ndarray
    duration: float

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any((t < 0) | (t > self.duration)):
            raise ValueError("time outside the simulated trace")
        return self.fields[np.searchsorted(self.times, t, side="right")]


def field_timeline(ensemble: ChargeEnsemble, trace: EventTrace, point, chunk: int = 1 << 20) -> FieldTimeline:
    """Nanoguide field at ``point`` after every event, built from per-event field changes."""
    point = vec3(point)
    eps = ensemble.geometry.epsilon_eff
    n_ev = len(trace)
    if len(ensemble) == 0:
        return FieldTimeline(trace.t.copy(), np.zeros((n_ev + 1, 3)), trace.duration)
    base = coulomb_fields(ensemble.q, ensemble.positions, point, eps)
    e0 = base.sum(axis=0)
    if n_ev == 0:
        return FieldTimeline(trace.t.copy(), e0[None, :], trace.duration)

    idx = trace.charge_index
    # Previous event of the same charge (or -1): stable sort by charge keeps time order.
    order = np.argsort(idx, kind="stable")
    prev_sorted = np.r_[-1, order[:-1]]
    same = np.r_[False, idx[order][1:] == idx[order][:-1]]
    prev = np.full(n_ev, -1, dtype=np.int64)
    prev[order] = np.where(same, prev_sorted, -1)

    delta = np.empty((n_ev, 3))
    for s in range(0, n_ev, chunk):
        sl = slice(s, min(s + chunk, n_ev))
        new = coulomb_fields(ensemble.q[idx[sl]], trace.new_position[sl], point, eps)
        p = prev[sl]
        old = base[idx[sl]].copy()
        has = p >= 0
        if np.any(has):
            old[has] = coulomb_fields(ensemble.q[idx[sl][has]], trace.new_position[p[has]], point, eps)
        delta[sl] = new - old
    fields = np.empty((n_ev + 1, 3))
    fields[0] = e0
    np.cumsum(delta, axis=0, out=fields[1:])
    fields[1:] += e0
    return FieldTimeline(trace.t.copy(), fields, trace.duration)
