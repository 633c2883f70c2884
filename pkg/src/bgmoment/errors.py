"""Exception hierarchy shared across the package."""


class BgMomentError(Exception):
    """Base class for every error raised by bgmoment."""


class ShapeError(BgMomentError, ValueError):
    """Operand shapes do not conform."""


class DomainError(BgMomentError, ValueError):
    """An operation was asked to evaluate outside its domain."""


class ContractError(BgMomentError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(BgMomentError, ArithmeticError):
    """A computation produced a non-finite value."""


class EligibilityError(BgMomentError):
    """A sample is not eligible for an optional transformation."""


class ValidationError(BgMomentError, ValueError):
    """Input records failed validation."""


class FormatError(BgMomentError, ValueError):
    """A file does not follow the expected on-disk format."""


class GenerationError(BgMomentError):
    """Synthetic data could not be generated with the requested settings."""


class ConfigError(BgMomentError, ValueError):
    """Run configuration is invalid."""
