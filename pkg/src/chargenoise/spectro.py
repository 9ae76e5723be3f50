"""Synthetic laser-sweep spectra of molecules driven by the charge dynamics."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from chargenoise.dynamics import EventTrace, FieldTimeline, TraceReplayer, field_timeline
from chargenoise.model import (
    BiasField,
    ChargeEnsemble,
    MoleculeProbe,
    coulomb_fields,
    nanoguide_field,
    stark_shift,
    static_field,
)

DETECTIONS = ("transmission", "fluorescence")


@dataclass(frozen=True)
class SweepConfig:
    """Laser sweep settings.

    ``center`` fixes the window centre; when None the window is centred on the
    expected resonance (probe frequency with all charges at their anchors).
    """

    span: float = 1e9
    sweep_rate: float = 1e10
    bins: int = 200
    repetition_rate: float = 10.0
    detection: str = "transmission"
    detector_flux: float = 2e6
    n_sweeps: int = 12000
    shot_noise: bool = True
    center: float | None = None

    def __post_init__(self):
        for name in ("span", "sweep_rate", "repetition_rate", "detector_flux"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if int(self.bins) != self.bins or self.bins < 1:
            raise ValueError("bins must be a positive integer")
        if self.n_sweeps < 0:
            raise ValueError("n_sweeps must be >= 0")
        if self.detection not in DETECTIONS:
            raise ValueError(f"detection must be one of {DETECTIONS}")
        if self.span * self.repetition_rate > self.sweep_rate * (1 + 1e-12):
            raise ValueError("sweeps do not fit their slots: span * repetition_rate > sweep_rate")

    @property
    def sweep_duration(self) -> float:
        return self.span / self.sweep_rate

    @property
    def dwell(self) -> float:
        return self.span / (self.sweep_rate * self.bins)

    @property
    def bin_width(self) -> float:
        return self.span / self.bins

    @property
    def period(self) -> float:
        return 1.0 / self.repetition_rate

    def bin_offsets(self) -> np.ndarray:
        """Bin-centre frequencies relative to the window centre."""
        return (np.arange(self.bins) + 0.5) * self.bin_width - self.span / 2

    def scaled_timing(self, factor: float) -> SweepConfig:
        """Same sweep with rates and detected flux multiplied by ``factor``.

        Counts per bin and sweep duration relative to the repetition period stay fixed.
        """
        return replace(self, sweep_rate=self.sweep_rate * factor,
                       repetition_rate=self.repetition_rate * factor,
                       detector_flux=self.detector_flux * factor)


@dataclass
class SweepRecord:
    t_start: float
    freqs: np.ndarray
    counts: np.ndarray


@dataclass
class SweepBatch:
    """All sweeps of one probe over a common frequency window."""

    t_start: np.ndarray
    freqs: np.ndarray
    counts: np.ndarray
    probe_name: str = "M1"
    detection: str = "transmission"

    def __post_init__(self):
        self.t_start = np.asarray(self.t_start, dtype=float).reshape(-1)
        self.freqs = np.asarray(self.freqs, dtype=float).reshape(-1)
        self.counts = np.asarray(self.counts).reshape(len(self.t_start), len(self.freqs))

    def __len__(self) -> int:
        return len(self.t_start)

    def __getitem__(self, k: int) -> SweepRecord:
        return SweepRecord(float(self.t_start[k]), self.freqs.copy(), self.counts[k].copy())

    def __iter__(self) -> Iterator[SweepRecord]:
        for k in range(len(self)):
            yield self[k]

    @property
    def records(self) -> list[SweepRecord]:
        return list(self)


@dataclass
class FrequencyTrace:
    times: np.ndarray
    f_c: np.ndarray
    sigma_fit: np.ndarray
    flags: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.f_c = np.asarray(self.f_c, dtype=float).reshape(-1)
        self.sigma_fit = np.asarray(self.sigma_fit, dtype=float).reshape(-1)
        self.flags = np.asarray(self.flags, dtype=object).reshape(-1)
        n = len(self.times)
        if not (len(self.f_c) == len(self.sigma_fit) == len(self.flags) == n):
            raise ValueError("trace columns differ in length")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trace times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def valid(self) -> np.ndarray:
        return self.flags == "ok"

    @classmethod
    def from_values(cls, times, f_c, sigma_fit=None, flags=None) -> FrequencyTrace:
        f_c = np.asarray(f_c, dtype=float)
        sigma_fit = np.zeros_like(f_c) if sigma_fit is None else sigma_fit
        flags = np.full(len(f_c), "ok", dtype=object) if flags is None else flags
        return cls(times, f_c, sigma_fit, flags)


def lineshape(nu, f_c, gamma: float, D: float = 0.13, detection: str = "transmission"):
    """Lorentzian extinction dip (transmission) or peak (fluorescence)."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    h2 = (gamma / 2) ** 2
    L = h2 / ((np.asarray(nu, dtype=float) - f_c) ** 2 + h2)
    if detection == "transmission":
        return 1 - D * L
    if detection == "fluorescence":
        return L
    raise ValueError(f"unknown detection {detection!r}")


def expected_resonance(probe: MoleculeProbe, ensemble: ChargeEnsemble, bias: BiasField, V: float) -> float:
    """Resonance with every charge sitting at its anchor."""
    E = static_field(bias, V)
    if len(ensemble):
        E = E + coulomb_fields(ensemble.q, ensemble.anchors, probe.position,
                               ensemble.geometry.epsilon_eff).sum(axis=0)
    return probe.f0 + float(stark_shift(E, probe.A))


def window_frequencies(probe, ensemble, bias, V, config: SweepConfig) -> np.ndarray:
    center = config.center if config.center is not None else expected_resonance(probe, ensemble, bias, V)
    return center + config.bin_offsets()


def bin_times(t_start: float, config: SweepConfig) -> np.ndarray:
    """Dwell-midpoint time of every bin of a sweep starting at ``t_start``."""
    return t_start + (np.arange(config.bins) + 0.5) * config.dwell


def _counts(expected: np.ndarray, config: SweepConfig, seed) -> np.ndarray:
    if not config.shot_noise:
        return expected
    return np.random.default_rng(seed).poisson(expected)


def _check_window(t_start: float, config: SweepConfig, trace: EventTrace) -> None:
    if t_start < 0 or t_start + config.sweep_duration > trace.duration * (1 + 1e-12):
        raise ValueError(f"sweep at t={t_start} runs past the end of the trace ({trace.duration} s)")


def synthesize_sweep(probe: MoleculeProbe, ensemble: ChargeEnsemble, trace: EventTrace,
                     bias: BiasField, V: float, config: SweepConfig, t_start: float,
                     seed=0) -> SweepRecord:
    """One sweep, replaying charge positions directly at every bin time."""
    _check_window(t_start, config, trace)
    freqs = window_frequencies(probe, ensemble, bias, V, config)
    E_static = static_field(bias, V)
    replay = TraceReplayer(ensemble, trace)
    f_c = np.empty(config.bins)
    for b, t in enumerate(bin_times(t_start, config)):
        E = E_static + nanoguide_field(ensemble.with_positions(replay.at(t)), probe.position)
        f_c[b] = probe.f0 + float(stark_shift(E, probe.A))
    signal = lineshape(freqs, f_c, probe.gamma, probe.D, config.detection)
    expected = config.detector_flux * config.dwell * signal
    return SweepRecord(t_start, freqs, _counts(expected, config, seed))


def sweep_seed(seed, probe_index: int, sweep_index: int) -> np.random.SeedSequence:
    """Child seed of one sweep in a campaign."""
    return np.random.SeedSequence(seed, spawn_key=(probe_index, sweep_index))


def campaign_start_times(config: SweepConfig, n_probes: int = 1, t0: float = 0.0) -> np.ndarray:
    """Start time of sweep k of probe j: ``t0 + k / repetition_rate + j * sweep_duration``."""
    k = np.arange(config.n_sweeps)
    j = np.arange(n_probes)
    return t0 + k[None, :] / config.repetition_rate + j[:, None] * config.sweep_duration


def resonance_series(probe: MoleculeProbe, timeline: FieldTimeline, bias: BiasField, V: float, times):
    E = static_field(bias, V) + timeline.at(times)
    return probe.f0 + stark_shift(E, probe.A)


def synthesize_campaign(probes: MoleculeProbe | Sequence[MoleculeProbe], ensemble: ChargeEnsemble,
                        trace: EventTrace, bias: BiasField | Sequence[BiasField], V: float,
                        config: SweepConfig,
                        seed=0, t0: float = 0.0, timelines: Sequence[FieldTimeline] | None = None
                        ) -> list[SweepBatch]:
    """Repeated sweeps for one or more time-multiplexed probes.

    Probes share the trace and alternate back to back inside each repetition
    period. Sweep k of probe j reproduces ``synthesize_sweep`` with seed
    ``sweep_seed(seed, j, k)``. ``bias`` may also be one field per probe.
    """
    if isinstance(probes, MoleculeProbe):
        probes = [probes]
    n_p = len(probes)
    biases = [bias] * n_p if isinstance(bias, BiasField) else list(bias)
    if len(biases) != n_p:
        raise ValueError("need one bias per probe")
    if n_p * config.sweep_duration > config.period * (1 + 1e-12):
        raise ValueError("alternating sweeps of all probes do not fit in one repetition period")
    starts = campaign_start_times(config, n_p, t0)
    if config.n_sweeps and starts.max() + config.sweep_duration > trace.duration * (1 + 1e-12):
        raise ValueError(
            f"campaign needs {starts.max() + config.sweep_duration:.6g} s of trace, "
            f"only {trace.duration:.6g} s simulated")
    if timelines is None:
        timelines = [field_timeline(ensemble, trace, p.position) for p in probes]
    offsets = (np.arange(config.bins) + 0.5) * config.dwell
    out = []
    for j, (probe, bias_j) in enumerate(zip(probes, biases)):
        freqs = window_frequencies(probe, ensemble, bias_j, V, config)
        t_bins = starts[j][:, None] + offsets[None, :]
        f_c = resonance_series(probe, timelines[j], bias_j, V, t_bins)
        expected = config.detector_flux * config.dwell * lineshape(
            freqs[None, :], f_c, probe.gamma, probe.D, config.detection)
        if config.shot_noise:
            counts = np.empty(expected.shape, dtype=np.int64)
            for k in range(config.n_sweeps):
                counts[k] = np.random.default_rng(sweep_seed(seed, j, k)).poisson(expected[k])
        else:
            counts = expected
        out.append(SweepBatch(starts[j], freqs, counts, probe.name, config.detection))
    return out
