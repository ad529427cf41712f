"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive operation."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class FormatError(ValueError):
    """A data file does not match its declared binary format."""


class DegenerateWeightsError(ValueError):
    """All sampling weights are zero; normalization is undefined."""
