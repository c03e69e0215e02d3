"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Bad configuration: invalid hyperparameter, shape mismatch, unknown key."""


class NumericalError(RuntimeError):
    """Non-finite value encountered where a finite one is required."""


class DegenerateInputError(ValueError):
    """An input is degenerate for the requested operation (e.g. zero-norm
    feature handed to cosine similarity)."""


class GatingError(RuntimeError):
    """An operation ran before its gate opened (e.g. consistency loss on a
    bank with fewer entries than k)."""


class DataFormatError(ValueError):
    """A data file failed to parse; message carries the line number."""
