"""Exception types raised across the package."""

import numpy as np


class EvopError(Exception):
    """Base class for package errors."""


class IntegrationDivergedError(EvopError, RuntimeError):
    def __init__(self, step, state):
        self.step = step
        self.state = state
        super().__init__(f"integration diverged at step {step}: state={state}")


class TrajectoryFormatError(EvopError, ValueError):
    """Malformed or invalid trajectory file."""


class ConvergenceError(EvopError, RuntimeError):
    """An iterative solver failed to converge."""


class NotPSDError(EvopError, ValueError):
    """A covariance matrix has a significantly negative eigenvalue."""


class SingularMatrixError(EvopError, np.linalg.LinAlgError):
    """A (regularized) matrix could not be factorized."""


class NonFiniteError(EvopError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class ConfigError(EvopError, ValueError):
    """Invalid run configuration."""
