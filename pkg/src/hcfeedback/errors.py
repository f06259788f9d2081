"""Exception types shared across the package."""


class HCFeedbackError(Exception):
    """Base class for all package errors."""


class ContractError(HCFeedbackError, ValueError):
    """Arguments violate a documented precondition (shapes, ranges)."""


class ConfigError(HCFeedbackError, ValueError):
    """Invalid configuration key, value or combination."""


class ResourceError(HCFeedbackError):
    """A requested object would exceed a configured size cap."""


class IntegrationError(HCFeedbackError):
    """Implicit time step failed (Newton did not converge)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DivergenceError(IntegrationError):
    """State or adjoint became non-finite during integration."""


class DataError(HCFeedbackError, ValueError):
    """Dataset content is unusable (non-finite entries, bad file)."""


class MetricError(HCFeedbackError, ValueError):
    """A relative error metric is undefined (zero denominator)."""
