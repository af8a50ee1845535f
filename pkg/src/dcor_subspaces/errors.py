"""Exception hierarchy shared by all modules."""


class DisentangleError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(DisentangleError, ValueError):
    """Invalid configuration, layout or argument value."""


class InvalidBatchError(DisentangleError, ValueError):
    """A sample batch is too small or contains non-finite entries."""


class ShapeError(DisentangleError, ValueError):
    """Inputs have incompatible shapes."""


class SingularCovarianceError(DisentangleError, ArithmeticError):
    """A covariance matrix needed by a Gaussian estimator is singular."""


class DegenerateDependenceError(DisentangleError, ArithmeticError):
    """A dependence measure is undefined for the given inputs."""


class DataError(DisentangleError, ValueError):
    """Labels or images violate their declared ranges."""


class PreprocessingError(DisentangleError, ValueError):
    """An external image could not be preprocessed."""


class ProtocolError(DisentangleError, ValueError):
    """An evaluation protocol precondition does not hold."""


class NumericalAbort(DisentangleError, RuntimeError):
    """Training or optimization produced a non-finite value."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
