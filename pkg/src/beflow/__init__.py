"""Neural time stepping of the heat equation through the Brezis-Ekeland functional.

Each implicit Euler step minimizes a primal-dual objective over a pair of
small dense networks; see :mod:`beflow.trainer` for the driver.
"""
from .errors import (BeflowError, ConfigError, DegenerateDualError, DomainError, NumericalError,
                     SolverAbort, UsageError)
from .loss import ProblemSpec
from .network import NetworkParams, forward, init_params, load_params, save_params
from .sampling import SampleSet, make_samples
from .trainer import TrainerConfig, solve

__version__ = "0.1.0"

__all__ = [
    "BeflowError", "ConfigError", "DegenerateDualError", "DomainError", "NumericalError", "SolverAbort",
    "UsageError", "ProblemSpec", "NetworkParams", "forward", "init_params", "load_params", "save_params",
    "SampleSet", "make_samples", "TrainerConfig", "solve",
]
