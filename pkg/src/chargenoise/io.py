"""Columnar text files with self-describing headers.

Layout::

    # format: "chargenoise-columnar/1"
    # kind: "frequency_trace"
    # <key>: <json value>
    col_a col_b col_c
    1.0000000000000001 2 ok
    ...

Header values are JSON. Floats are written with 17 significant digits so a
write/read cycle is bit-exact. Readers report the file and line of any
malformed row.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from chargenoise.dynamics import EventTrace
from chargenoise.errors import DataFormatError, FingerprintMismatchError
from chargenoise.spectro import FrequencyTrace, SweepBatch
from chargenoise.stats import CorrelationCurve, EtaCalibration, StepHistogram

FORMAT = "chargenoise-columnar/1"
_KINDS = {"f": float, "i": int, "s": str}


@dataclass
class Table:
    header: dict
    columns: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def __len__(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0


def _fmt(kind: str) -> str:
    return {"f": "%.17g", "i": "%d", "s": "%s"}[kind]


def _kind(a: np.ndarray) -> str:
    if a.dtype.kind in "iub":
        return "i"
    if a.dtype.kind == "f":
        return "f"
    return "s"


def write_table(path, columns: Mapping[str, np.ndarray], header: Mapping | None = None, kind: str = "table") -> Path:
    path = Path(path)
    cols = {k: np.asarray(v) for k, v in columns.items()}
    lengths = {len(v) for v in cols.values()}
    if len(lengths) > 1:
        raise ValueError("columns differ in length")
    for name in cols:
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"invalid column name {name!r}")
    kinds = {k: _kind(v) for k, v in cols.items()}
    for k, v in cols.items():
        if kinds[k] == "s" and any((not s) or any(c.isspace() for c in s) for s in map(str, v)):
            raise ValueError(f"string column {k!r} must hold non-empty tokens without spaces")
    meta = {"format": FORMAT, "kind": kind, "dtypes": "".join(kinds[k] for k in cols)}
    meta.update(header or {})
    lines = [f"# {k}: {json.dumps(v, sort_keys=True)}" for k, v in meta.items()]
    lines.append(" ".join(cols))
    n = lengths.pop() if lengths else 0
    if n:
        fmt = " ".join(_fmt(kinds[k]) for k in cols)
        # Transpose to per-row tuples; object arrays keep Python ints/floats exact.
        rows = zip(*(v.tolist() for v in cols.values()))
        lines.extend(fmt % row for row in rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def _parse_header(path: Path, lines: list[str]) -> tuple[dict, int]:
    header = {}
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        body = lines[i][1:].strip()
        key, sep, value = body.partition(":")
        if not sep:
            raise DataFormatError(path, i + 1, "header line lacks 'key: value'")
        try:
            header[key.strip()] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise DataFormatError(path, i + 1, f"header value is not valid JSON ({exc.msg})") from None
        i += 1
    if header.get("format") != FORMAT:
        raise DataFormatError(path, 1, f"not a {FORMAT} file")
    return header, i


def _convert_line(path, lineno, tokens, kinds):
    out = []
    for tok, k in zip(tokens, kinds):
        try:
            if k == "f":
                out.append(float(tok))
            elif k == "i":
                out.append(int(tok))
            else:
                out.append(tok)
        except ValueError:
            raise DataFormatError(path, lineno, f"cannot parse {tok!r} as {_KINDS[k].__name__}") from None
    return out


def read_table(path, kind: str | None = None) -> Table:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataFormatError(path, None, f"cannot read file ({exc.strerror})") from None
    lines = text.splitlines()
    if not lines:
        raise DataFormatError(path, 1, "empty file")
    header, i = _parse_header(path, lines)
    if kind is not None and header.get("kind") != kind:
        raise DataFormatError(path, 1, f"expected kind {kind!r}, found {header.get('kind')!r}")
    if i >= len(lines):
        raise DataFormatError(path, i + 1, "missing column-name line")
    names = lines[i].split()
    kinds = header.get("dtypes", "f" * len(names))
    if len(kinds) != len(names) or any(k not in _KINDS for k in kinds):
        raise DataFormatError(path, i + 1, "column names do not match the dtypes header")
    body = lines[i + 1:]
    first = i + 2  # 1-based line number of the first data row
    while body and not body[-1].strip():
        body.pop()
    n, m = len(body), len(names)

    tokens = " ".join(body).split()
    fast = len(tokens) == n * m
    columns = {}
    if fast:
        grid = np.array(tokens, dtype=str).reshape(n, m) if n else np.empty((0, m), dtype=str)
        try:
            for j, (name, k) in enumerate(zip(names, kinds)):
                col = grid[:, j]
                if k == "f":
                    columns[name] = col.astype(float)
                elif k == "i":
                    columns[name] = col.astype(np.int64)
                else:
                    columns[name] = col.astype(object)
        except (ValueError, OverflowError):
            fast = False
    if not fast:
        # Slow path only to locate the offending line.
        for r, line in enumerate(body):
            toks = line.split()
            if len(toks) != m:
                raise DataFormatError(path, first + r, f"expected {m} fields, found {len(toks)}")
            _convert_line(path, first + r, toks, kinds)
        raise DataFormatError(path, None, "malformed data")  # pragma: no cover - slow path always raises
    for name, k in zip(names, kinds):
        if k == "f" and not np.all(np.isfinite(columns[name])) and name not in header.get("nan_ok", []):
            r = int(np.flatnonzero(~np.isfinite(columns[name]))[0])
            raise DataFormatError(path, first + r, f"non-finite value in column {name!r}")
    return Table(header, columns)


def read_table_header(path) -> dict:
    """Header of a columnar file without parsing its rows."""
    path = Path(path)
    lines = []
    try:
        with open(path) as fh:
            for line in fh:
                if not line.startswith("#"):
                    break
                lines.append(line.rstrip("\n"))
    except OSError as exc:
        raise DataFormatError(path, None, f"cannot read file ({exc.strerror})") from None
    return _parse_header(path, lines)[0]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# Typed readers and writers

def write_event_trace(path, trace: EventTrace, header: Mapping | None = None) -> Path:
    meta = {"duration_s": trace.duration, "seed": trace.seed, "params": trace.params}
    meta.update(header or {})
    cols = {"t": trace.t, "charge_index": trace.charge_index, "x": trace.new_position[:, 0],
            "y": trace.new_position[:, 1], "z": trace.new_position[:, 2]}
    return write_table(path, cols, meta, kind="event_trace")


def read_event_trace(path) -> EventTrace:
    tab = read_table(path, "event_trace")
    pos = np.column_stack([tab["x"], tab["y"], tab["z"]]) if len(tab) else np.zeros((0, 3))
    trace = EventTrace(tab["t"], tab["charge_index"], pos, float(tab.header["duration_s"]),
                       tab.header.get("seed"), tab.header.get("params", {}))
    try:
        trace.check()
    except ValueError as exc:
        raise DataFormatError(path, None, str(exc)) from None
    return trace


def write_sweeps(path, batch: SweepBatch, header: Mapping | None = None) -> Path:
    n, b = batch.counts.shape
    meta = {"probe": batch.probe_name, "detection": batch.detection, "n_sweeps": n, "bins": b}
    meta.update(header or {})
    counts = batch.counts
    if counts.dtype.kind == "f":
        if not np.all(counts == np.round(counts)):
            meta["counts_expected"] = True
    cols = {
        "sweep_index": np.repeat(np.arange(n), b),
        "t_start": np.repeat(batch.t_start, b),
        "bin_freq": np.tile(batch.freqs, n),
        "counts": counts.reshape(-1) if counts.dtype.kind == "f" and meta.get("counts_expected")
        else counts.reshape(-1).astype(np.int64),
    }
    return write_table(path, cols, meta, kind="sweeps")


def read_sweeps(path) -> SweepBatch:
    tab = read_table(path, "sweeps")
    h = tab.header
    n, b = int(h["n_sweeps"]), int(h["bins"])
    if len(tab) != n * b:
        raise DataFormatError(path, None, f"expected {n * b} rows, found {len(tab)}")
    idx = tab["sweep_index"].reshape(n, b)
    if not np.array_equal(idx, np.repeat(np.arange(n), b).reshape(n, b)):
        raise DataFormatError(path, None, "sweep_index column is not 0..n-1 in blocks of bins")
    freqs = tab["bin_freq"].reshape(n, b)
    if n and np.any(freqs != freqs[0]):
        raise DataFormatError(path, None, "bin frequencies differ between sweeps")
    if np.any(tab["counts"] < 0):
        r = int(np.flatnonzero(tab["counts"] < 0)[0])
        raise DataFormatError(path, _first_data_line(path) + r, "negative count")
    counts = tab["counts"].reshape(n, b)
    return SweepBatch(tab["t_start"].reshape(n, b)[:, 0], freqs[0] if n else np.zeros(b), counts,
                      h.get("probe", "M1"), h.get("detection", "transmission"))


def _first_data_line(path) -> int:
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.startswith("#"):
                return i + 1
    return 1


def write_frequency_trace(path, trace: FrequencyTrace, header: Mapping | None = None) -> Path:
    meta = dict(trace.meta)
    meta.update(header or {})
    meta["nan_ok"] = ["f_c", "sigma_fit"]
    cols = {"t": trace.times, "f_c": trace.f_c, "sigma_fit": trace.sigma_fit,
            "flag": np.asarray([str(f) for f in trace.flags], dtype=object)}
    return write_table(path, cols, meta, kind="frequency_trace")


def read_frequency_trace(path) -> FrequencyTrace:
    tab = read_table(path, "frequency_trace")
    meta = {k: v for k, v in tab.header.items() if k not in ("format", "kind", "dtypes", "nan_ok")}
    try:
        return FrequencyTrace(tab["t"], tab["f_c"], tab["sigma_fit"], tab["flag"], meta)
    except ValueError as exc:
        raise DataFormatError(path, None, str(exc)) from None


def write_correlation(path, curve: CorrelationCurve, header: Mapping | None = None) -> Path:
    meta = {"dt_s": curve.dt}
    meta.update(header or {})
    return write_table(path, {"lag_s": curve.lags, "value": curve.values, "n_pairs": curve.n_pairs},
                       meta, kind="correlation")


def read_correlation(path) -> CorrelationCurve:
    tab = read_table(path, "correlation")
    return CorrelationCurve(tab["lag_s"], tab["value"], tab["n_pairs"], float(tab.header["dt_s"]))


def write_step_histogram(path, hist: StepHistogram, gaussian=None, ratio=None,
                         header: Mapping | None = None) -> Path:
    """Bins with counts; optionally the fitted Gaussian and the regularised ratio."""
    meta = {"n_steps": hist.n_steps, "bin_width_Hz": hist.bin_width, "step_std_Hz": hist.step_std,
            "last_edge_Hz": float(hist.bin_edges[-1])}
    meta.update(header or {})
    cols = {"lower_edge_Hz": hist.bin_edges[:-1], "center_Hz": hist.centers, "counts": hist.counts}
    if gaussian is not None:
        cols["gaussian"] = np.asarray(gaussian, dtype=float)
    if ratio is not None:
        cols["ratio"] = np.asarray(ratio, dtype=float)
    return write_table(path, cols, meta, kind="step_histogram")


def read_step_histogram(path) -> StepHistogram:
    tab = read_table(path, "step_histogram")
    h = tab.header
    edges = np.append(tab["lower_edge_Hz"], h["last_edge_Hz"])
    counts = tab["counts"].astype(np.int64)
    if int(counts.sum()) != int(h["n_steps"]):
        raise DataFormatError(path, None, "counts do not add up to n_steps")
    return StepHistogram(edges, counts, int(h["n_steps"]), float(h["bin_width_Hz"]), float(h["step_std_Hz"]))


def write_calibration(path, cal: EtaCalibration, header: Mapping | None = None) -> Path:
    reps = np.atleast_2d(cal.eta_replicates)
    cols = {"n_q_per_m3": cal.n_q, "eta_mean": cal.eta, "eta_std": cal.eta_std}
    if reps.size:
        for r in range(reps.shape[1]):
            cols[f"eta_rep{r}"] = reps[:, r]
    meta = {"baseline": cal.baseline, "fingerprint": cal.fingerprint,
            "config_fingerprint": cal.config_fingerprint,
            "baseline_replicates": [float(x) for x in np.asarray(cal.baseline_replicates).ravel()],
            "monotone": cal.monotone}
    meta.update(header or {})
    return write_table(path, cols, meta, kind="eta_calibration")


def read_calibration(path, expected_fingerprint: str | None = None) -> EtaCalibration:
    tab = read_table(path, "eta_calibration")
    h = tab.header
    reps = [tab[k] for k in sorted(tab.columns) if k.startswith("eta_rep")]
    cal = EtaCalibration(tab["n_q_per_m3"], tab["eta_mean"], tab["eta_std"], float(h["baseline"]),
                         str(h["fingerprint"]),
                         np.column_stack(reps) if reps else np.zeros((0, 0)),
                         np.asarray(h.get("baseline_replicates", []), dtype=float),
                         str(h.get("config_fingerprint", "")))
    if expected_fingerprint is not None and cal.fingerprint != expected_fingerprint:
        raise FingerprintMismatchError(
            f"{path}: calibration fingerprint {cal.fingerprint} does not match analysis {expected_fingerprint}")
    return cal
