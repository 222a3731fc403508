"""Exception types shared across the package.

Each class maps to a distinct CLI exit code (see cli module).
"""


class ConfigError(ValueError):
    """Invalid configuration: unknown keys, out-of-range values, infeasible settings."""


class DataError(ValueError):
    """Malformed dataset files: schema violations, shape mismatches, non-finite values."""


class TrainingError(RuntimeError):
    """Numerical failure during training, e.g. non-finite gradients."""
