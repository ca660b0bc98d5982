"""Exception hierarchy shared across the pipeline.

The CLI maps these onto its exit-code contract: ConfigError -> 1,
DataError -> 2, NumericError -> 3.
"""


class SomnError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(SomnError):
    """Invalid or inconsistent configuration."""


class DataError(SomnError):
    """Malformed, truncated, or inconsistent input data."""


class ExcludedSubjectError(DataError):
    """Subject cannot be used (e.g. a required channel is missing)."""


class NumericError(SomnError):
    """Non-finite values or divergence during computation."""
