"""Exception hierarchy shared across the package."""


class SomnError(Exception):
    """Base class for all errors raised by this package."""


class NonPositiveDefinite(SomnError, ValueError):
    """A covariance matrix could not be Cholesky-factorized."""


class DegenerateDensity(SomnError, ArithmeticError):
    """The mixture density at a point is zero even in log space."""


class IndexOutOfRange(SomnError, IndexError):
    pass


class NonPositiveSigma(SomnError, ValueError):
    pass


class PGMError(SomnError, ValueError):
    """Generic PGM decoding failure."""


class MalformedHeader(PGMError):
    pass


class UnsupportedMaxval(PGMError):
    pass


class TruncatedData(PGMError):
    pass


class AllWhiteImage(SomnError, ValueError):
    """The image carries no darkness mass, so it defines no distribution."""


class MalformedCheckpoint(SomnError, ValueError):
    pass


class VersionMismatch(SomnError, ValueError):
    pass


class DimensionMismatch(SomnError, ValueError):
    pass


class InsufficientSamples(SomnError, ValueError):
    pass
