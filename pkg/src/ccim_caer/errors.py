"""Exception hierarchy shared by every module in the package."""


class CcimError(Exception):
    """Base class for all package errors."""


class DimensionError(CcimError, ValueError):
    """Array shapes or requested dimensions are inconsistent."""


class SizeError(CcimError, ValueError):
    """A requested count exceeds what the input can supply."""


class NumericError(CcimError, ValueError):
    """Input contains NaN or infinite values."""


class ParameterError(CcimError, ValueError):
    """A scalar hyperparameter is outside its valid range."""


class ValidationError(CcimError, ValueError):
    """A loaded file or object violates its schema or invariants."""


class VersionError(ValidationError):
    """A serialized file has a missing or unsupported schema version."""


class ContractError(CcimError, RuntimeError):
    """A cached intermediate does not match the call it is used with."""


class GenerationError(CcimError, RuntimeError):
    """The synthetic generator could not satisfy its constraints."""


class ConfigError(CcimError, ValueError):
    """A training or run configuration is incomplete or inconsistent."""
