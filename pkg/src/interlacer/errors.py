"""Exception types shared across the package.

The CLI maps ``ValidationError`` (and its subclasses) to exit code 2 and
``OSError`` to exit code 3.
"""


class ValidationError(ValueError):
    """Input data or configuration failed validation."""


class DimensionError(ValidationError):
    """Operand shapes are incompatible."""


class ContractError(ValidationError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValidationError):
    """A config file violates its schema; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message
