"""Exception hierarchy shared across the package.

CLI exit codes are attached to the top-level categories so that
``retina_risk.cli`` can map any failure to the documented status.
"""


class RetinaRiskError(Exception):
    exit_code = 1


class ConfigurationError(RetinaRiskError):
    exit_code = 2


class DataError(RetinaRiskError):
    exit_code = 3


class TrainingError(RetinaRiskError):
    exit_code = 4

    def __init__(self, message, step=None, member=None):
        super().__init__(message)
        self.step = step
        self.member = member


class MetricError(RetinaRiskError):
    exit_code = 5


class DimensionError(RetinaRiskError, ValueError):
    """Operand shapes do not conform."""


class ContractError(RetinaRiskError, ValueError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(RetinaRiskError, FloatingPointError):
    """An operation produced NaN or Inf."""


class UndefinedMetricError(MetricError):
    """Metric has no value on this input (single class, constant actuals, ...)."""


class UnstableMetricError(MetricError):
    """Too many bootstrap replicates were undefined."""


class FitError(MetricError):
    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm


class RangeError(RetinaRiskError, ValueError):
    """Input lies outside the supported range of a risk equation."""
