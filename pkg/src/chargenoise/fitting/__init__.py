from chargenoise.fitting.fitters import (
    FitResult,
    LorentzianFits,
    ParabolaFit,
    fit_exponential,
    fit_gaussian,
    fit_lorentzian,
    fit_lorentzian_batch,
    fit_parabola,
    gaussian,
)
from chargenoise.fitting.lm import levenberg_marquardt

__all__ = [
    "FitResult",
    "LorentzianFits",
    "ParabolaFit",
    "fit_exponential",
    "fit_gaussian",
    "fit_lorentzian",
    "fit_lorentzian_batch",
    "fit_parabola",
    "gaussian",
    "levenberg_marquardt",
]
