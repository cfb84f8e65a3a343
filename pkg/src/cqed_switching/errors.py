"""Exception hierarchy shared by every module."""


class CqedError(Exception):
    """Base class for all package errors."""


class InvalidArgument(CqedError, ValueError):
    pass


class NumericalDegeneracy(CqedError, ArithmeticError):
    """Zero norm or zero trace where a normalizable object was expected."""


class DegenerateSteadyState(CqedError):
    pass


class ConvergenceError(CqedError):
    pass


class TruncationError(CqedError):
    """Fock-space truncation is too small for the dynamics."""

    def __init__(self, message, required_n_max=None, max_top_population=None):
        super().__init__(message)
        self.required_n_max = required_n_max
        self.max_top_population = max_top_population


class NumericalInstability(CqedError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ResamplingError(CqedError):
    pass


class FitError(CqedError):
    def __init__(self, message, best_residual=None):
        super().__init__(message)
        self.best_residual = best_residual


class UndersampledModelError(CqedError):
    pass


class DecodingError(CqedError):
    pass


class ConfigError(CqedError):
    """Invalid run configuration; ``line`` points into the config file when known."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
