"""Exception hierarchy shared across the pipeline.

ConfigError maps to CLI exit code 1 (bad input/configuration),
DataError to exit code 2 (runtime or data failures).
"""


class PipelineError(Exception):
    """Base class for all pipeline failures."""


class ConfigError(PipelineError):
    """Invalid configuration, spec file, or argument."""


class DataError(PipelineError):
    """Invalid or missing data encountered while running."""


class TensorFormatError(DataError):
    """Base class for tensor-file format violations."""


class BadMagicError(TensorFormatError):
    """File does not start with the expected magic bytes."""


class VersionError(TensorFormatError):
    """Unsupported tensor-file format version."""


class TruncatedError(TensorFormatError):
    """Declared dims disagree with the available payload."""


class NonFiniteError(TensorFormatError):
    """Tensor payload contains NaN or infinite values."""
