"""Exception hierarchy shared by all modules."""


class MVSDEError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MVSDEError, ValueError):
    """Invalid configuration: bad shapes, step sizes, unknown keys."""


class InvalidStateError(MVSDEError, ValueError):
    """Non-finite coordinates reached a drift evaluation."""


class SolverError(MVSDEError, RuntimeError):
    """The implicit step failed to converge.

    Attributes
    ----------
    residual : float
        Worst residual norm over all particles at the last iteration.
    """

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class RegimeError(MVSDEError, ValueError):
    """Model constants fall outside the regime where the contraction closes."""
