"""Exception hierarchy shared across the package."""


class TircalError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(TircalError, ValueError):
    """Invalid configuration value, file, or CLI usage."""


class DataError(TircalError, ValueError):
    """Malformed or unreadable input data (frames, CSV rows, artifacts)."""


class FrameMismatchError(TircalError, ValueError):
    """Parameter sets reference inconsistent frames."""


class DegenerateSampleError(TircalError):
    """A minimal sample admits no valid affine solution; caller resamples."""


class EstimationFailedError(TircalError):
    """No acceptable consensus found for a correspondence set."""


class SolverFailureError(TircalError):
    """Linear system or kernel factorization could not be solved."""


class UndefinedMetricError(TircalError):
    """Metric undefined on the given data (empty set, zero variance)."""


class GenerationError(TircalError):
    """Synthetic sequence generation hit a degenerate configuration."""
