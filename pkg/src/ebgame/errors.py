"""Exception types shared across the package."""


class EbGameError(Exception):
    """Base class for all package errors."""


class ShapeError(EbGameError, ValueError):
    """Array shapes or dimensions do not agree."""


class ConfigError(EbGameError, ValueError):
    """Invalid configuration value or combination."""


class ContractError(EbGameError, ValueError):
    """A precondition of an operation was violated."""


class ParseError(EbGameError, ValueError):
    """Malformed input while reading a WFDB header, signal or annotation file."""


class RangeError(EbGameError, ValueError):
    """A value falls outside its representable range."""
