"""Simulation lab for mean-field interacting particle SDEs."""

__version__ = "0.1.0"

from .errors import ConfigError, InvalidStateError, MVSDEError, RegimeError, SolverError
from .model import Ensemble, ModelSpec, drift, interaction_conv, make_model
from .schemes import InitialLaw, SchemeConfig, simulate

__all__ = [
    "__version__",
    "ConfigError",
    "InvalidStateError",
    "MVSDEError",
    "RegimeError",
    "SolverError",
    "Ensemble",
    "ModelSpec",
    "drift",
    "interaction_conv",
    "make_model",
    "InitialLaw",
    "SchemeConfig",
    "simulate",
]
