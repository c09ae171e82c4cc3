"""Exception types shared across the package."""


class CaseError(Exception):
    """Base class for all package errors."""


class InputError(CaseError, ValueError):
    pass


class ShapeError(CaseError, ValueError):
    pass


class NumericalError(CaseError, ArithmeticError):
    pass


class ConvergenceError(CaseError, RuntimeError):
    pass


class StateError(CaseError, RuntimeError):
    pass


class DegenerateError(CaseError, ValueError):
    """A weighted mean was requested over zero total weight."""


class IoError(CaseError, OSError):
    pass


class CheckpointError(CaseError, ValueError):
    """Checkpoint is readable but lacks tensors required by the caller."""
