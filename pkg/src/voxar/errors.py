"""Exception types shared across the package.

The CLI maps these onto process exit codes: UsageError -> 1,
DataError -> 2, NumericError -> 3.
"""


class VoxarError(Exception):
    """Base class for all package errors."""


class UsageError(VoxarError):
    """Caller violated a documented precondition (bad argument, empty mask)."""


class ShapeError(UsageError):
    """Array dimensions do not match what an operation requires."""


class ConfigError(UsageError):
    """A configuration value is outside its legal range."""


class DataError(VoxarError):
    """A file or dataset could not be read or is inconsistent."""


class BadMagicError(DataError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(DataError):
    """File ended before the declared payload was complete."""


class VersionError(DataError):
    """File declares a format version this reader does not understand."""


class ChecksumError(DataError):
    """Stored checksum does not match the file contents."""


class DegenerateDataError(DataError):
    """Input data is constant or empty where variation is required."""


class NumericError(VoxarError):
    """A non-finite value appeared where finite numbers are required."""
