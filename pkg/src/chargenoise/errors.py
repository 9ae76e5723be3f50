"""Exception types shared across the package."""

from __future__ import annotations


class DegenerateGeometryError(ValueError):
    """A field was requested at the location of a point charge."""


class FitError(RuntimeError):
    """A fit could not be set up (too few points, rank-deficient design)."""


class GridMismatchError(ValueError):
    """Time series do not share a common uniform sampling grid."""


class BelowSensitivityError(ValueError):
    """Measured non-Gaussianity does not exceed the fit-noise baseline."""


class ExtrapolationError(ValueError):
    """Requested value lies outside the calibrated range."""


class FingerprintMismatchError(ValueError):
    """Calibration and data were produced with different analysis settings."""


class DataFormatError(ValueError):
    """A columnar data file is malformed.

    The message names the file and the offending line.
    """

    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        loc = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{loc}: {message}")


class ConfigError(ValueError):
    """Invalid experiment configuration, located by key path and source line."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None, path=None):
        self.key = key
        self.line = line
        self.path = None if path is None else str(path)
        parts = []
        if self.path is not None:
            parts.append(self.path if line is None else f"{self.path}:{line}")
        elif line is not None:
            parts.append(f"line {line}")
        if key:
            parts.append(key)
        prefix = ": ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class DegradedDataError(RuntimeError):
    """Too many sweeps were flagged by the fitter for the statistics to be trusted."""
