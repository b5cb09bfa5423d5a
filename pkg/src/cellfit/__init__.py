"""Parameter identification for evolving-curve models of cell motility."""

from .data_io import NoiseSpec, add_noise, generate_targets, load_observations, save_observations
from .geometry import Curve
from .models import FreeParameter, ModelSpec, Proportional, Schnakenberg, YeastThreshold, bind_parameters
from .objective import ObservationSet, ResidualFunction, phase_field_residuals, sharp_residuals
from .optimizer import LMOptions, LMResult, lm_solve
from .solver import SolverConfig, Trajectory, make_initial_data, simulate

__version__ = "0.1.0"

__all__ = [
    "Curve",
    "FreeParameter",
    "LMOptions",
    "LMResult",
    "ModelSpec",
    "NoiseSpec",
    "ObservationSet",
    "Proportional",
    "ResidualFunction",
    "Schnakenberg",
    "SolverConfig",
    "Trajectory",
    "YeastThreshold",
    "add_noise",
    "bind_parameters",
    "generate_targets",
    "lm_solve",
    "load_observations",
    "make_initial_data",
    "phase_field_residuals",
    "save_observations",
    "sharp_residuals",
    "simulate",
]
