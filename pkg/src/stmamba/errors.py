"""Exception taxonomy shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are inconsistent with an operation's contract."""


class ConfigurationError(ValueError):
    """A configuration value is invalid (bad window size, even kernel, ...)."""


class LayoutError(ValueError):
    """Token/window layout metadata does not match the data it is applied to."""


class DomainError(ValueError):
    """A numeric argument is outside the mathematical domain of an operation."""


class ContractError(ValueError):
    """An API contract was violated (e.g. backward() on a non-scalar loss)."""


class NumericsError(RuntimeError):
    """A non-finite value appeared where the pipeline requires finite numbers."""
