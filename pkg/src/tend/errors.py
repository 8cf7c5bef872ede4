"""Exception hierarchy shared by all tend modules."""


class TendError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(TendError, ValueError):
    """Unknown option, shape mismatch or otherwise invalid setup."""


class ParameterError(TendError, ValueError):
    """A parameter is outside its documented range or degenerate."""


class ContractError(TendError, RuntimeError):
    """An operation was called in a state its contract forbids."""


class TrainingError(TendError, RuntimeError):
    """Training diverged (non-finite loss) or received no data."""


class MetricError(TendError, ValueError):
    """A metric is undefined for the given input (e.g. a single class)."""
