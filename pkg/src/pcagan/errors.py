"""Exception types shared across the package."""


class PcaGanError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(PcaGanError, ValueError):
    """An argument violates a documented precondition."""


class NumericalFailureError(PcaGanError, ArithmeticError):
    """A numerical routine produced non-finite or unusable results."""


class DataFormatError(PcaGanError, IOError):
    """Base class for on-disk container problems."""


class VersionMismatchError(DataFormatError):
    """The file carries an unsupported format version."""


class ChecksumMismatchError(DataFormatError):
    """Payload bytes do not match the recorded checksum."""


class TruncatedFileError(DataFormatError):
    """The file ends before the declared payload does."""


class PriorMismatchError(DataFormatError):
    """Dataset was generated under a different prior/measurement model."""
