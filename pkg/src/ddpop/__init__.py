"""Density-dependent population processes with time-varying rates.

Exact jump-process simulation, mean-field ODE limits, stability analysis of
the SIS dynamics, optimal control of the infection and cure rates, and the
construction of population processes that realize a given vector field.
"""

from ._backend import BACKEND
from .errors import ControlError, DdpopError, DomainError, IntegrationError, ModelError, SimulationError
from .model import (Box, Polynomial, PopulationModel, Simplex, TransitionChannel, drift, make_logistic, make_sis,
                    model_from_dict, rate_derivative, total_rate)
from .rates import RateFunction

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Box",
    "ControlError",
    "DdpopError",
    "DomainError",
    "IntegrationError",
    "ModelError",
    "Polynomial",
    "PopulationModel",
    "RateFunction",
    "SimulationError",
    "Simplex",
    "TransitionChannel",
    "drift",
    "make_logistic",
    "make_sis",
    "model_from_dict",
    "rate_derivative",
    "total_rate",
]
