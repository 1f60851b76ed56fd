"""Exception hierarchy shared across the package."""


class CRLSCError(Exception):
    """Base class for all package errors."""


class ValidationError(CRLSCError, ValueError):
    """Input failed a shape, range or finiteness check."""


class ConfigError(CRLSCError, ValueError):
    """Inconsistent or unknown configuration."""


class EmptyStoreError(CRLSCError):
    """Search against a knowledge base with no entries."""


class NumericError(CRLSCError, ArithmeticError):
    """Non-finite value produced during a forward or training pass."""


class FormatError(CRLSCError):
    """Binary file could not be parsed."""


class MagicMismatchError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass
