"""Exception types shared across the package."""


class DenseSfmError(Exception):
    """Base class for every error this package raises on purpose."""


class DimensionMismatch(DenseSfmError, ValueError):
    """Grid, vector, or matrix dimensions do not agree."""


class AngleNearPi(DenseSfmError, ArithmeticError):
    """Rotation angle is too close to pi for a stable logarithm."""


class NonPositiveInputDepth(DenseSfmError, ValueError):
    """An input depth value was zero or negative."""


class InvalidMixture(DenseSfmError, ValueError):
    """Mixture weights or variances violate their constraints."""


class InsufficientMatches(DenseSfmError, ValueError):
    """Fewer correspondences than the minimal sample size."""


class DegenerateGeometry(DenseSfmError, ArithmeticError):
    """No well-posed epipolar model exists for the given matches."""


class SingularSystem(DenseSfmError, ArithmeticError):
    """The reduced normal equations are rank deficient."""


class NoValidPixels(DenseSfmError, ValueError):
    """Not enough weighted pixels to pose the problem."""


class ZeroTranslation(DenseSfmError, ValueError):
    """Translation direction is undefined for a zero vector."""


class EmptyInput(DenseSfmError, ValueError):
    """An input collection that must be non-empty was empty."""


class BadMagic(DenseSfmError, IOError):
    """File does not start with the expected magic bytes."""


class TruncatedFile(DenseSfmError, IOError):
    """File ended before the payload announced in its header."""


class MalformedHeader(DenseSfmError, IOError):
    """File header could not be parsed."""


class ConfigError(DenseSfmError, ValueError):
    """Run configuration is malformed or contains unknown keys."""
