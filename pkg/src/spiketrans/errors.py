"""Exception hierarchy shared across the package."""


class SpiketransError(Exception):
    """Base class for all library errors."""


class DimensionError(SpiketransError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class UsageError(SpiketransError, RuntimeError):
    """An API was called out of contract (stale state, consumed tape, ...)."""


class ConfigError(SpiketransError, ValueError):
    """A configuration object violates its own invariants."""


class ContractError(SpiketransError, ValueError):
    """A value-level contract was violated (e.g. non-binary spike input)."""


class RangeError(SpiketransError, ValueError):
    """An input value lies outside its documented range."""


class IntegrityError(SpiketransError, RuntimeError):
    """A serialized artifact is corrupt, truncated, or mismatched."""
