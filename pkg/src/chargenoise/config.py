"""Experiment configuration files.

A configuration is a YAML mapping whose numeric keys carry their unit in the
name (``guided_flux_photons_per_s``, ``width_m``). Every value is validated on
load; errors name the file, the line and the offending key.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from chargenoise.dynamics import AuxFocus, IlluminationConfig, JumpModel
from chargenoise.errors import ConfigError
from chargenoise.model import BiasField, MoleculeProbe, NanoguideGeometry
from chargenoise.spectro import SweepConfig
from chargenoise.stats import AnalysisSettings


# --------------------------------------------------------------------------
# Seeds

def child_seed(master: int, stage: str, *keys: int) -> np.random.SeedSequence:
    """Seed for one stage (and replicate/grid index) derived from the master seed.

    The stage name is hashed with CRC-32 into the spawn key, so adding a
    stage or a replicate never changes the seeds of existing ones.
    """
    return np.random.SeedSequence(int(master), spawn_key=(zlib.crc32(stage.encode()), *map(int, keys)))


def seed_int(ss: np.random.SeedSequence) -> int:
    """Collapse a SeedSequence into a plain integer (for headers and for APIs taking ints)."""
    return int(ss.generate_state(2, np.uint32).astype(np.uint64) @ np.array([1, 1 << 32], dtype=np.uint64))


# --------------------------------------------------------------------------
# Sections

@dataclass(frozen=True)
class PowerSweepSettings:
    guided_flux: tuple[float, ...] = (3e5, 3e6, 3e7, 3e8)
    reference_flux: float = 3e7
    n_sweeps: int = 4000


@dataclass(frozen=True)
class FocusScanSettings:
    positions: tuple[float, ...] = tuple(np.round(np.arange(-2e-6, 2.0001e-6, 0.25e-6), 12))
    aux_flux: float = 6e6
    fwhm: float = 1e-6
    guided_flux: float = 3e6
    repetition_rate: float = 2.0
    n_sweeps: int = 12000


@dataclass(frozen=True)
class CorrelateSettings:
    separations: tuple[float, ...] = (26e-9, 80e-9, 2e-6)
    standoff: float = 100e-9
    guided_flux: float = 3e6
    repetition_rate: float = 0.1
    n_sweeps: int = 2000
    voltage: float = 30.0
    span: float = 3e9
    match_bias: bool = True


@dataclass(frozen=True)
class AmplitudeScalingSettings:
    jump_lengths: tuple[float, ...] = (20e-9 / np.sqrt(2), 20e-9, 20e-9 * np.sqrt(2))
    densities: tuple[float, ...] = (1.25e22, 2.5e22, 5e22)
    ensembles: int = 4
    n_sweeps: int = 3000
    voltage: float = 30.0
    span: float = 3e9


@dataclass(frozen=True)
class CalibrationSettings:
    densities: tuple[float, ...] = (2.5e21, 7.9e21, 2.5e22, 7.9e22, 2.5e23)
    replicates: int = 3
    n_sweeps: int = 12000
    match_sigma: bool = True


@dataclass(frozen=True)
class VoltageScanSettings:
    voltages: tuple[float, ...] = tuple(float(v) for v in range(-30, 31))
    n_sweeps: int = 300
    guided_flux: float = 3e8
    sweep_speedup: float = 10.0
    match_bias: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    geometry: NanoguideGeometry = field(default_factory=NanoguideGeometry)
    bias: BiasField = field(default_factory=lambda: BiasField(E_cr=(0.0, 0.0, -5e4)))
    voltage: float = 20.0
    probes: tuple[MoleculeProbe, ...] = field(default_factory=lambda: (MoleculeProbe((0.0, 150e-9, 0.0)),))
    n_q: float = 2.5e22
    ensemble_seed: int | None = None
    illumination: IlluminationConfig = field(default_factory=lambda: IlluminationConfig(3e7))
    jump: JumpModel = field(default_factory=JumpModel)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)
    warmup: float | None = None
    seed: int = 0
    output_dir: str = "out"
    power_sweep: PowerSweepSettings = field(default_factory=PowerSweepSettings)
    focus_scan: FocusScanSettings = field(default_factory=FocusScanSettings)
    correlate: CorrelateSettings = field(default_factory=CorrelateSettings)
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    amplitude_scaling: AmplitudeScalingSettings = field(default_factory=AmplitudeScalingSettings)
    voltage_scan: VoltageScanSettings = field(default_factory=VoltageScanSettings)

    def with_(self, **changes) -> ExperimentConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return config_to_dict(self)

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())

    def analysis_fingerprint(self) -> str:
        """Hash of everything that shapes a step histogram: sweep, fit and binning rules."""
        d = self.to_dict()
        return fingerprint({"sweep": d["sweep"], "analysis": d["analysis"]})


def fingerprint(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# Schema: section -> {yaml key: (attribute, kind)}

_GEOMETRY = {
    "width_m": ("width", "pos"),
    "height_m": ("height", "pos"),
    "segment_length_m": ("segment_length", "pos"),
    "epsilon_eff": ("epsilon_eff", "float"),
    "center_x_m": ("center_x", "float"),
}
_BIAS = {
    "E_cr_V_per_m": ("E_cr", "vec"),
    "gain_V_per_m_per_V": ("g", "nonneg"),
    "u_hat": ("u_hat", "vec"),
    "voltage_V": ("voltage", "float"),
}
_PROBE = {
    "name": ("name", "str"),
    "position_m": ("position", "vec"),
    "f0_Hz": ("f0", "pos"),
    "stark_coefficient_Hz_per_V2_m2": ("A", "pos"),
    "linewidth_Hz": ("gamma", "pos"),
    "extinction_depth": ("D", "float"),
}
_CHARGES = {
    "density_per_m3": ("n_q", "nonneg"),
    "ensemble_seed": ("ensemble_seed", "int_or_null"),
    "jump_displacement_m": ("d", "pos"),
}
_ILLUM = {
    "guided_flux_photons_per_s": ("guided_flux", "nonneg"),
    "kappa_per_photon": ("kappa", "nonneg"),
    "aux_focus": ("aux_focus", "aux"),
}
_AUX = {
    "center_m": ("center_x", "float"),
    "flux_photons_per_s": ("flux", "nonneg"),
    "fwhm_m": ("fwhm", "pos"),
}
_SWEEP = {
    "span_Hz": ("span", "pos"),
    "sweep_rate_Hz_per_s": ("sweep_rate", "pos"),
    "bins": ("bins", "posint"),
    "repetition_rate_per_s": ("repetition_rate", "pos"),
    "detection": ("detection", "str"),
    "detector_flux_photons_per_s": ("detector_flux", "pos"),
    "n_sweeps": ("n_sweeps", "nonnegint"),
    "shot_noise": ("shot_noise", "bool"),
    "center_Hz": ("center", "float_or_null"),
}
_ANALYSIS = {
    "clip_sigmas": ("clip_sigmas", "pos"),
    "clip_passes": ("clip_passes", "posint"),
    "step_bin_width_std": ("step_bin_width", "pos"),
    "step_range_std": ("step_range", "pos"),
    "regularization": ("regularization", "nonneg"),
    "max_lag_fraction": ("max_lag_fraction", "pos"),
    "tau_fit_window": ("tau_window", "pos"),
}
_CAMPAIGN = {
    "warmup_s": ("warmup", "nonneg_or_null"),
}
_POWER = {
    "guided_flux_photons_per_s": ("guided_flux", "poslist"),
    "reference_flux_photons_per_s": ("reference_flux", "pos"),
    "n_sweeps": ("n_sweeps", "posint"),
}
_FOCUS = {
    "positions_m": ("positions", "list"),
    "aux_flux_photons_per_s": ("aux_flux", "pos"),
    "fwhm_m": ("fwhm", "pos"),
    "guided_flux_photons_per_s": ("guided_flux", "pos"),
    "repetition_rate_per_s": ("repetition_rate", "pos"),
    "n_sweeps": ("n_sweeps", "posint"),
}
_CORRELATE = {
    "separations_m": ("separations", "poslist"),
    "standoff_m": ("standoff", "pos"),
    "guided_flux_photons_per_s": ("guided_flux", "pos"),
    "repetition_rate_per_s": ("repetition_rate", "pos"),
    "n_sweeps": ("n_sweeps", "posint"),
    "voltage_V": ("voltage", "float"),
    "span_Hz": ("span", "pos"),
    "match_bias": ("match_bias", "bool"),
}
_AMPLITUDE = {
    "jump_lengths_m": ("jump_lengths", "poslist"),
    "densities_per_m3": ("densities", "poslist"),
    "ensembles": ("ensembles", "posint"),
    "n_sweeps": ("n_sweeps", "posint"),
    "voltage_V": ("voltage", "float"),
    "span_Hz": ("span", "pos"),
}
_CALIBRATION = {
    "densities_per_m3": ("densities", "poslist"),
    "replicates": ("replicates", "posint"),
    "n_sweeps": ("n_sweeps", "posint"),
    "match_sigma": ("match_sigma", "bool"),
}
_VSCAN = {
    "voltages_V": ("voltages", "list"),
    "n_sweeps": ("n_sweeps", "posint"),
    "guided_flux_photons_per_s": ("guided_flux", "pos"),
    "sweep_speedup": ("sweep_speedup", "pos"),
    "match_bias": ("match_bias", "bool"),
}
_TOP = {"seed", "output_dir", "geometry", "bias", "probes", "charges", "illumination", "sweep",
        "analysis", "campaign", "power_sweep", "focus_scan", "correlate", "calibration", "voltage_scan",
        "amplitude_scaling"}


class _Lines:
    """Line numbers of every key path in a YAML document."""

    def __init__(self, text: str, path: str | None):
        self.path = path
        self.lines: dict[tuple, int] = {}
        try:
            node = yaml.compose(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                              line=mark.line + 1 if mark else None, path=path) from None
        if node is not None:
            self._walk(node, ())

    def _walk(self, node, prefix):
        # A key's own line wins over the line where its value starts.
        self.lines.setdefault(prefix, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                self.lines[prefix + (k.value,)] = k.start_mark.line + 1
                self._walk(v, prefix + (k.value,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, prefix + (i,))

    def error(self, key_path: tuple, message: str) -> ConfigError:
        line = None
        for n in range(len(key_path), -1, -1):
            if key_path[:n] in self.lines:
                line = self.lines[key_path[:n]]
                break
        key = ".".join(str(k) for k in key_path)
        return ConfigError(message, key=key, line=line, path=self.path)


def _number(v, where, lines: _Lines) -> float:
    # PyYAML reads '1e-9' (no dot) as a string; accept it as a number.
    if isinstance(v, bool):
        raise lines.error(where, "expected a number, got a boolean")
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            raise lines.error(where, f"expected a number, got {v!r}") from None
    if isinstance(v, (int, float)):
        return float(v)
    raise lines.error(where, f"expected a number, got {type(v).__name__}")


def _coerce(kind: str, v, where, lines: _Lines):
    if kind.endswith("_or_null") and v is None:
        return None
    base = kind.replace("_or_null", "")
    if base == "str":
        if not isinstance(v, str):
            raise lines.error(where, "expected a string")
        return v
    if base == "bool":
        if not isinstance(v, bool):
            raise lines.error(where, "expected true or false")
        return v
    if base in ("int", "posint", "nonnegint"):
        x = _number(v, where, lines)
        if x != int(x):
            raise lines.error(where, "expected an integer")
        x = int(x)
        if base == "posint" and x < 1 or base == "nonnegint" and x < 0:
            raise lines.error(where, "out of range")
        return x
    if base in ("float", "pos", "nonneg"):
        x = _number(v, where, lines)
        if not np.isfinite(x):
            raise lines.error(where, "must be finite")
        if base == "pos" and not x > 0:
            raise lines.error(where, "must be positive")
        if base == "nonneg" and not x >= 0:
            raise lines.error(where, "must be non-negative")
        return x
    if base == "vec":
        if not isinstance(v, list) or len(v) != 3:
            raise lines.error(where, "expected a list of 3 numbers")
        return tuple(_number(x, where + (i,), lines) for i, x in enumerate(v))
    if base in ("list", "poslist"):
        if not isinstance(v, list) or not v:
            raise lines.error(where, "expected a non-empty list")
        out = tuple(_number(x, where + (i,), lines) for i, x in enumerate(v))
        if base == "poslist" and any(x <= 0 for x in out):
            raise lines.error(where, "all entries must be positive")
        return out
    raise AssertionError(kind)


def _section(raw, schema, where, lines: _Lines) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise lines.error(where, "expected a mapping")
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise lines.error(where + (key,), f"unknown key {key!r}")
        attr, kind = schema[key]
        if kind == "aux":
            out[attr] = None if value is None else _section(value, _AUX, where + (key,), lines)
        else:
            out[attr] = _coerce(kind, value, where + (key,), lines)
    return out


def _build(ctor, kwargs, where, lines: _Lines):
    try:
        return ctor(**kwargs)
    except (ValueError, TypeError) as exc:
        raise lines.error(where, str(exc)) from None


def parse_config(text: str, path: str | None = None) -> ExperimentConfig:
    lines = _Lines(text, path)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:  # pragma: no cover - compose already caught it
        raise ConfigError(str(exc), path=path) from None
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise lines.error((), "top level must be a mapping")
    for key in raw:
        if key not in _TOP:
            raise lines.error((key,), f"unknown section {key!r}")

    base = ExperimentConfig()
    top = {}
    if "seed" in raw:
        top["seed"] = _coerce("nonnegint", raw["seed"], ("seed",), lines)
    if "output_dir" in raw:
        top["output_dir"] = _coerce("str", raw["output_dir"], ("output_dir",), lines)

    geo = _section(raw.get("geometry"), _GEOMETRY, ("geometry",), lines)
    top["geometry"] = _build(lambda **kw: replace(base.geometry, **kw), geo, ("geometry",), lines)

    bias = _section(raw.get("bias"), _BIAS, ("bias",), lines)
    if "voltage" in bias:
        top["voltage"] = bias.pop("voltage")
    top["bias"] = _build(lambda **kw: BiasField(**{"E_cr": base.bias.E_cr, "g": base.bias.g,
                                                    "u_hat": base.bias.u_hat, **kw}), bias, ("bias",), lines)

    if "probes" in raw:
        plist = raw["probes"]
        if not isinstance(plist, list) or not plist:
            raise lines.error(("probes",), "expected a non-empty list of probes")
        probes = []
        for i, p in enumerate(plist):
            kw = _section(p, _PROBE, ("probes", i), lines)
            if "position" not in kw:
                raise lines.error(("probes", i), "probe needs position_m")
            kw.setdefault("name", f"M{i + 1}")
            probes.append(_build(MoleculeProbe, kw, ("probes", i), lines))
        names = [p.name for p in probes]
        if len(set(names)) != len(names):
            raise lines.error(("probes",), "probe names must be unique")
        top["probes"] = tuple(probes)

    ch = _section(raw.get("charges"), _CHARGES, ("charges",), lines)
    if "n_q" in ch:
        top["n_q"] = ch["n_q"]
    if "ensemble_seed" in ch:
        top["ensemble_seed"] = ch["ensemble_seed"]
    if "d" in ch:
        top["jump"] = _build(JumpModel, {"d": ch["d"]}, ("charges", "jump_displacement_m"), lines)

    il = _section(raw.get("illumination"), _ILLUM, ("illumination",), lines)
    aux = il.pop("aux_focus", None)
    if aux is not None:
        if "center_x" not in aux or "flux" not in aux:
            raise lines.error(("illumination", "aux_focus"), "aux_focus needs center_m and flux_photons_per_s")
        il["aux_focus"] = _build(AuxFocus, aux, ("illumination", "aux_focus"), lines)
    il.setdefault("guided_flux", base.illumination.guided_flux)
    top["illumination"] = _build(IlluminationConfig, il, ("illumination",), lines)

    sw = _section(raw.get("sweep"), _SWEEP, ("sweep",), lines)
    top["sweep"] = _build(lambda **kw: replace(base.sweep, **kw), sw, ("sweep",), lines)
    an = _section(raw.get("analysis"), _ANALYSIS, ("analysis",), lines)
    top["analysis"] = _build(lambda **kw: replace(base.analysis, **kw), an, ("analysis",), lines)
    camp = _section(raw.get("campaign"), _CAMPAIGN, ("campaign",), lines)
    top.update(camp)

    for name, schema, cls in (("power_sweep", _POWER, PowerSweepSettings), ("focus_scan", _FOCUS, FocusScanSettings),
                              ("correlate", _CORRELATE, CorrelateSettings),
                              ("calibration", _CALIBRATION, CalibrationSettings),
                              ("voltage_scan", _VSCAN, VoltageScanSettings),
                              ("amplitude_scaling", _AMPLITUDE, AmplitudeScalingSettings)):
        kw = _section(raw.get(name), schema, (name,), lines)
        top[name] = _build(lambda **k: replace(getattr(base, name), **k), kw, (name,), lines)

    cfg = replace(base, **top)
    _check_geometry(cfg, lines)
    return cfg


def _check_geometry(cfg: ExperimentConfig, lines: _Lines) -> None:
    g = cfg.geometry
    for i, p in enumerate(cfg.probes):
        inside = abs(p.position[1]) < g.width / 2 and abs(p.position[2]) < g.height / 2
        if inside:
            raise lines.error(("probes", i, "position_m"), "probe lies inside the nanoguide cross-section")


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path=str(path)) from None
    return parse_config(text, str(path))


# --------------------------------------------------------------------------
# Serialisation back to the file format

def _vec(v) -> list:
    return [float(x) for x in np.asarray(v, dtype=float)]


def _plain(obj):
    """Numpy scalars and tuples to built-in types, so YAML and JSON can write them."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _plain(_config_dict(cfg))


def _config_dict(cfg: ExperimentConfig) -> dict:
    g, b, il, s, a = cfg.geometry, cfg.bias, cfg.illumination, cfg.sweep, cfg.analysis
    aux = None
    if il.aux_focus is not None:
        aux = {"center_m": il.aux_focus.center_x, "flux_photons_per_s": il.aux_focus.flux,
               "fwhm_m": il.aux_focus.fwhm}
    return {
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "geometry": {"width_m": g.width, "height_m": g.height, "segment_length_m": g.segment_length,
                     "epsilon_eff": g.epsilon_eff, "center_x_m": g.center_x},
        "bias": {"E_cr_V_per_m": _vec(b.E_cr), "gain_V_per_m_per_V": b.g, "u_hat": _vec(b.u_hat),
                 "voltage_V": cfg.voltage},
        "probes": [{"name": p.name, "position_m": _vec(p.position), "f0_Hz": p.f0,
                    "stark_coefficient_Hz_per_V2_m2": p.A, "linewidth_Hz": p.gamma,
                    "extinction_depth": p.D} for p in cfg.probes],
        "charges": {"density_per_m3": cfg.n_q, "ensemble_seed": cfg.ensemble_seed,
                    "jump_displacement_m": cfg.jump.d},
        "illumination": {"guided_flux_photons_per_s": il.guided_flux, "kappa_per_photon": il.kappa,
                         "aux_focus": aux},
        "sweep": {"span_Hz": s.span, "sweep_rate_Hz_per_s": s.sweep_rate, "bins": s.bins,
                  "repetition_rate_per_s": s.repetition_rate, "detection": s.detection,
                  "detector_flux_photons_per_s": s.detector_flux, "n_sweeps": s.n_sweeps,
                  "shot_noise": s.shot_noise, "center_Hz": s.center},
        "analysis": {"clip_sigmas": a.clip_sigmas, "clip_passes": a.clip_passes,
                     "step_bin_width_std": a.step_bin_width, "step_range_std": a.step_range,
                     "regularization": a.regularization, "max_lag_fraction": a.max_lag_fraction,
                     "tau_fit_window": a.tau_window},
        "campaign": {"warmup_s": cfg.warmup},
        "power_sweep": {"guided_flux_photons_per_s": list(cfg.power_sweep.guided_flux),
                        "reference_flux_photons_per_s": cfg.power_sweep.reference_flux,
                        "n_sweeps": cfg.power_sweep.n_sweeps},
        "focus_scan": {"positions_m": list(cfg.focus_scan.positions),
                       "aux_flux_photons_per_s": cfg.focus_scan.aux_flux, "fwhm_m": cfg.focus_scan.fwhm,
                       "guided_flux_photons_per_s": cfg.focus_scan.guided_flux,
                       "repetition_rate_per_s": cfg.focus_scan.repetition_rate,
                       "n_sweeps": cfg.focus_scan.n_sweeps},
        "correlate": {"separations_m": list(cfg.correlate.separations), "standoff_m": cfg.correlate.standoff,
                      "guided_flux_photons_per_s": cfg.correlate.guided_flux,
                      "repetition_rate_per_s": cfg.correlate.repetition_rate,
                      "n_sweeps": cfg.correlate.n_sweeps, "voltage_V": cfg.correlate.voltage,
                      "span_Hz": cfg.correlate.span, "match_bias": cfg.correlate.match_bias},
        "amplitude_scaling": {"jump_lengths_m": list(cfg.amplitude_scaling.jump_lengths),
                              "densities_per_m3": list(cfg.amplitude_scaling.densities),
                              "ensembles": cfg.amplitude_scaling.ensembles,
                              "n_sweeps": cfg.amplitude_scaling.n_sweeps,
                              "voltage_V": cfg.amplitude_scaling.voltage,
                              "span_Hz": cfg.amplitude_scaling.span},
        "calibration": {"densities_per_m3": list(cfg.calibration.densities),
                        "replicates": cfg.calibration.replicates, "n_sweeps": cfg.calibration.n_sweeps,
                        "match_sigma": cfg.calibration.match_sigma},
        "voltage_scan": {"voltages_V": list(cfg.voltage_scan.voltages), "n_sweeps": cfg.voltage_scan.n_sweeps,
                         "guided_flux_photons_per_s": cfg.voltage_scan.guided_flux,
                         "sweep_speedup": cfg.voltage_scan.sweep_speedup,
                         "match_bias": cfg.voltage_scan.match_bias},
    }


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
