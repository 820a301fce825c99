"""Exception hierarchy shared across the package."""


class BDDMError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(BDDMError, ValueError):
    """Array shapes or dimensionalities do not agree."""


class DomainError(BDDMError, ValueError):
    """A numeric argument falls outside the domain where a formula is defined."""


class ContractError(BDDMError, ValueError):
    """A call violates an API contract (bad tag, empty input, non-scalar loss)."""


class EmptyScheduleError(DomainError):
    """Noise scheduling stopped before producing a single step."""


class SearchFailure(DomainError):
    """Every candidate of a schedule search failed."""


class CompatibilityError(BDDMError):
    """Artifacts were produced under incompatible diffusion settings."""


class ConfigError(BDDMError, ValueError):
    """A configuration file is malformed or missing required keys."""
