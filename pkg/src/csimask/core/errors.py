"""Exception types shared across the package."""


class CsimaskError(Exception):
    """Base class for package-specific failures."""


class DimensionError(CsimaskError, ValueError):
    """Tensor shapes incompatible with an operation's contract."""


class ConfigError(CsimaskError, ValueError):
    """Invalid or inconsistent configuration."""


class MissingGradientError(CsimaskError, RuntimeError):
    """An optimizer step found a parameter without a populated gradient."""


class NonFiniteError(CsimaskError, ArithmeticError):
    """A computation produced NaN or Inf where finite values are required."""


class FileFormatError(CsimaskError, IOError):
    """Base class for on-disk container problems; ``code`` discriminates."""

    code = "format"


class BadMagicError(FileFormatError):
    code = "bad-magic"


class BadVersionError(FileFormatError):
    code = "bad-version"


class TruncatedFileError(FileFormatError):
    code = "truncated"


class ShapeMismatchError(FileFormatError):
    code = "shape-mismatch"


class ConfigHashMismatchError(FileFormatError):
    code = "config-hash-mismatch"
