"""Weakly supervised temporal action localisation with snippet clustering
and optimal-transport self-labeling."""

from .errors import (CaseError, CheckpointError, ConvergenceError, DegenerateError,
                     InputError, IoError, NumericalError, ShapeError, StateError)
from .ot_core import sinkhorn

__version__ = "0.1.0"

__all__ = [
    "CaseError", "CheckpointError", "ConvergenceError", "DegenerateError", "InputError",
    "IoError", "NumericalError", "ShapeError", "StateError", "sinkhorn", "__version__",
]
