"""Exception hierarchy shared across the package."""


class SdaError(Exception):
    """Base class for all package-specific errors."""


class FormatError(SdaError):
    """A file does not conform to the expected on-disk layout."""


class WriteError(SdaError):
    """An output file could not be written."""


class ShapeError(SdaError):
    """Array dimensions are inconsistent with the operation's contract."""


class DomainError(SdaError):
    """A scalar argument lies outside its valid domain."""


class DataError(SdaError):
    """Input data is insufficient or invalid for the requested operation."""


class NumericalError(SdaError):
    """A computation cannot proceed without numerical blowup."""
