"""Exception hierarchy shared by all octproj modules."""


class OctprojError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(OctprojError):
    """A file does not conform to its declared binary/text format."""


class FileIoError(OctprojError):
    """A file could not be read or written completely (e.g. truncated payload)."""


class ShapeError(OctprojError):
    """Operand extents are incompatible with the requested operation."""


class ConsistencyError(OctprojError):
    """On-disk artifacts disagree with each other (metadata vs. actual content)."""


class ContractError(OctprojError):
    """A documented precondition of an operation was violated by the caller."""


class SubjectLookupError(OctprojError):
    """A subject id is missing from a table that must cover it."""


class NumericsError(OctprojError):
    """Training hit a non-finite loss or gradient and aborted."""
