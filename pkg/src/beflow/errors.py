"""Exception types raised across the solver."""


class BeflowError(Exception):
    """Base class for all solver errors."""


class UsageError(BeflowError, ValueError):
    """Bad arguments: shape mismatches, mixed tapes, out-of-range values."""


class DomainError(BeflowError, ArithmeticError):
    """An operation was applied outside its mathematical domain."""

    def __init__(self, message, node=None):
        super().__init__(message if node is None else f"{message} (node {node})")
        self.node = node


class NumericalError(BeflowError, FloatingPointError):
    """A loss, term or gradient became non-finite."""


class DegenerateDualError(NumericalError):
    """The dual network's penalized H1 seminorm is (numerically) zero."""


class ConfigError(UsageError):
    """A configuration key is unknown or its value is invalid."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class SolverAbort(BeflowError):
    """A training phase failed; carries the (n, k) position of the failure."""

    def __init__(self, message, n=None, k=None, epoch=None):
        where = ", ".join(
            f"{name}={val}" for name, val in (("n", n), ("k", k), ("epoch", epoch)) if val is not None
        )
        super().__init__(f"{message} [{where}]" if where else message)
        self.n, self.k, self.epoch = n, k, epoch
