"""Simulation and spectral-diffusion analysis of light-activated charge noise
seen by single-molecule Stark probes next to a dielectric nanoguide."""

from chargenoise.errors import (
    BelowSensitivityError,
    ConfigError,
    DataFormatError,
    DegenerateGeometryError,
    DegradedDataError,
    ExtrapolationError,
    FingerprintMismatchError,
    FitError,
    GridMismatchError,
)

__version__ = "0.1.0"

__all__ = [
    "BelowSensitivityError",
    "ConfigError",
    "DataFormatError",
    "DegenerateGeometryError",
    "DegradedDataError",
    "ExtrapolationError",
    "FingerprintMismatchError",
    "FitError",
    "GridMismatchError",
    "__version__",
]
