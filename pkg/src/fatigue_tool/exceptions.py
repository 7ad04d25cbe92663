"""Custom exceptions for fatigue-tool.

Every exception carries the process exit code the CLI reports for it.
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class FatigueToolError(Exception):
    """Base class for all errors raised by fatigue-tool."""

    exit_code = EXIT_USAGE


class ContractViolationError(FatigueToolError, ValueError):
    """A precondition on shapes, ranges or arguments does not hold."""


class ConfigurationError(FatigueToolError):
    """Config file parsing failed, an unknown key was used, or a value is invalid."""

    exit_code = EXIT_CONFIG


class DataError(FatigueToolError):
    """Clip file, manifest or dataset directory is missing or malformed."""

    exit_code = EXIT_DATA


class WeightFileError(DataError):
    """Weight file could not be read back into a model."""


class WeightMagicError(WeightFileError):
    """File does not start with the NLW1 magic bytes."""


class WeightTruncatedError(WeightFileError):
    """File ended before the declared tensors were fully read."""


class WeightMismatchError(WeightFileError):
    """Tensor names or shapes in the file do not match the model."""


class NumericalError(FatigueToolError):
    """Training produced a non-finite loss."""

    exit_code = EXIT_NUMERICAL
