"""Mean-field-game laboratory: forward solver, higher-order linearization,
partial boundary measurements, and obstacle/running-cost reconstruction."""

from .errors import (
    AmbiguityError,
    ConfigurationError,
    DivergenceError,
    GeometryError,
    MFGLabError,
    NonConvergenceError,
    PreconditionError,
    SolverError,
    StageError,
    ValidationError,
)
from .geometry import ObstacleSpec, boundary_patch, build_grid, candidate_obstacles
from .mfg import BoundaryRegime, RunningCost, solve_mfg
from .parabolic import TimeGrid

__version__ = "0.1.0"

__all__ = [
    "AmbiguityError",
    "BoundaryRegime",
    "ConfigurationError",
    "DivergenceError",
    "GeometryError",
    "MFGLabError",
    "NonConvergenceError",
    "ObstacleSpec",
    "PreconditionError",
    "RunningCost",
    "SolverError",
    "StageError",
    "TimeGrid",
    "ValidationError",
    "boundary_patch",
    "build_grid",
    "candidate_obstacles",
    "solve_mfg",
]
