"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, numeric divergence exits 4.
"""


class SpeechAnimError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(SpeechAnimError):
    """Invalid configuration value, unknown key, or unusable preset."""


class DataError(SpeechAnimError):
    """Problem with on-disk data: missing files, bad formats, bad values."""


class AlignmentError(DataError):
    """Audio and motion durations disagree by more than the tolerance."""


class FormatError(DataError):
    """A file exists but its contents do not parse as expected."""


class ContractError(SpeechAnimError):
    """An operation was called with arguments violating its contract."""


class NumericDivergenceError(SpeechAnimError):
    """Non-finite values appeared where finite ones are required."""
