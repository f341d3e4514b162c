"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class NumericError(ValueError):
    """Non-finite values where the operation requires finite input."""


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class DataError(RuntimeError):
    """Broken or missing dataset artifacts (CLI exit code 3)."""


class GenerationError(RuntimeError):
    """Scene sampling could not satisfy its constraints."""
