"""Exception hierarchy shared by every module."""


class CompressError(Exception):
    """Base class for all errors raised by nncompress."""


class ShapeError(CompressError, ValueError):
    pass


class InvalidLabelError(CompressError, ValueError):
    pass


class InvalidInputError(CompressError, ValueError):
    pass


class StateError(CompressError, RuntimeError):
    pass


class ConfigError(CompressError, ValueError):
    pass


class DegenerateError(CompressError, ValueError):
    """Raised when a quantity is undefined for the given input (e.g. a one-entry codebook)."""


class ParseError(CompressError):
    """A model, dataset or report file could not be decoded."""


class BadMagicError(ParseError):
    pass


class UnsupportedVersionError(ParseError):
    pass


class TruncatedFileError(ParseError):
    pass


class ChecksumError(ParseError):
    pass
