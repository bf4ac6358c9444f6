"""Exception taxonomy shared across the package."""


class SegdistillError(Exception):
    """Base class for all package errors."""


class DimensionError(SegdistillError):
    """Shapes or sizes are inconsistent with an operation's contract."""


class ParameterError(SegdistillError):
    """A scalar argument is outside its allowed range."""


class NumericFaultError(SegdistillError):
    """A computation produced or received non-finite values."""


class ContractError(SegdistillError):
    """A caller violated a documented precondition (e.g. non-deterministic
    closure handed to the gradient checker)."""


class ConfigError(SegdistillError):
    """Invalid or unknown configuration entry."""


class DataError(SegdistillError):
    """Dataset content is inconsistent (labels, class counts, manifests)."""


class FormatError(SegdistillError):
    """A binary or text artifact does not match its expected layout.

    Messages include the offending path and, for binary files, the byte
    offset where decoding failed.
    """


class UsageError(SegdistillError):
    """Bad command-line invocation."""
