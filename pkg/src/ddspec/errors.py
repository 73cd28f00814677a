"""Exception and warning classes shared across the toolkit."""


class DDSpecError(Exception):
    """Base class for all toolkit errors."""


class DomainError(DDSpecError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class UnsupportedModelError(DDSpecError, ValueError):
    """The spectral model kind does not support the requested operation."""


class ResolutionError(DDSpecError, ValueError):
    """A time step is too coarse for the correlation time or pulse spacing."""


class IntegrationError(DDSpecError, ArithmeticError):
    """Quadrature failed to reach the requested tolerance."""

    def __init__(self, message, value=None, error_estimate=None):
        super().__init__(message)
        self.value = value
        self.error_estimate = error_estimate


class FitError(DDSpecError, ArithmeticError):
    """A least-squares fit did not converge or the data cannot be fit."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DegenerateDataError(FitError):
    """All data points are indistinguishable from the noise floor."""


class EstimationError(DDSpecError, ValueError):
    """Too few samples for a statistical estimator."""


class GeometryError(DDSpecError, ValueError):
    """Invalid bath geometry (e.g. a spin on top of the probe)."""


class ApproximationError(DDSpecError, ValueError):
    """The delta-filter approximation is not valid for this pulse count."""


class RangeError(DDSpecError, ValueError):
    """Input data do not span the range an estimator needs."""


class SamplingDensityError(DDSpecError, ValueError):
    """Sweep points too sparse (or too few) to unwrap the echo phase."""


class InsensitiveConfigurationError(DDSpecError, ValueError):
    """The sensor has zero field response (e.g. operated at the ZEFOZ point)."""


class ExportError(DDSpecError, ValueError):
    """Dataset schema not recognised by the plot exporter."""


class ConfigError(DDSpecError, ValueError):
    """Base class for configuration problems (CLI exit code 2)."""


class ConfigSyntaxError(ConfigError):
    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class UnknownKeyError(ConfigError):
    pass


class UnitSuffixError(ConfigError):
    pass


class RangeViolationError(ConfigError):
    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = tuple(keys)


class RankDeficiencyWarning(UserWarning):
    """Fit Jacobian is (numerically) rank deficient; errors are inflated."""


class IsolatedSpinWarning(UserWarning):
    """Some bath spins have no flip-flop partner and stay frozen forever."""


class DataFileError(DDSpecError, OSError):
    """A data file is missing, unreadable or has the wrong columns (CLI exit code 4)."""
