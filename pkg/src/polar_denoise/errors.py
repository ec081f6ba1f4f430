"""Exception hierarchy shared across the package."""


class PolarDenoiseError(Exception):
    """Base class for all package errors."""


class SpecFunDomainError(PolarDenoiseError, ValueError):
    """Argument outside the mathematical domain (z <= 0, negative or non-half-integral order)."""


class SpecFunRangeError(PolarDenoiseError, ValueError):
    """Input outside the supported accuracy range; refusing to degrade silently."""


class SingularityError(PolarDenoiseError):
    """Evaluation point too close to a kernel singularity (an atom)."""


class DimensionMismatchError(PolarDenoiseError, ValueError):
    """Operands disagree on the ambient dimension."""


class InvalidParameterError(PolarDenoiseError, ValueError):
    """A generator or configuration parameter is invalid; message names the key."""


class IdxFormatError(PolarDenoiseError, ValueError):
    """Base class for IDX image file parsing errors."""


class MalformedMagicError(IdxFormatError):
    pass


class UnsupportedTypeError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class UnsupportedImageSizeError(IdxFormatError):
    pass


class PriorFormatError(PolarDenoiseError, ValueError):
    """Base class for atom-cloud binary format errors."""


class CorruptHeaderError(PriorFormatError):
    pass


class VersionMismatchError(PriorFormatError):
    pass


class EmptyBallError(PolarDenoiseError, ValueError):
    """No atom inside the requested ball; the certificate is undefined."""


class NoKeptPairsError(PolarDenoiseError, ValueError):
    """Every training pair fell below the truncation radius."""


class NonFiniteStateError(PolarDenoiseError, FloatingPointError):
    """A simulated state became NaN or infinite (bug guard)."""


class CertificateViolationError(PolarDenoiseError, AssertionError):
    """A computed concentration certificate fell below its guaranteed bound."""
