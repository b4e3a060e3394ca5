"""Exception types shared across the package."""


class SplatOccError(Exception):
    """Base class for all package errors."""


class PreconditionError(SplatOccError, ValueError):
    """An argument violates a documented precondition (e.g. non-positive depth)."""


class ConfigurationError(SplatOccError, ValueError):
    """Inconsistent configuration: mismatched dimensions, bad rig, bad mask setup."""


class DegenerateInputError(SplatOccError, ValueError):
    """Input is well-formed but leaves nothing to compute on (e.g. no valid pixels)."""


class FormatError(SplatOccError, ValueError):
    """A file could not be parsed."""


class UnsupportedVersionError(FormatError):
    pass


class ContractError(SplatOccError, RuntimeError):
    """An object was used outside of its contract (e.g. a stale render context)."""
