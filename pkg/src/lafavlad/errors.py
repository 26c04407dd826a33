"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ValidationError(ValueError):
    """Input data or configuration violates a documented precondition."""


class ParseError(ValidationError):
    """A text input could not be parsed."""


class CheckpointError(ValueError):
    """A checkpoint file is truncated, corrupt, or has the wrong version."""


class UsageError(ValueError):
    """An API or command was invoked incorrectly."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""

    def __init__(self, message, tensor_name=None):
        super().__init__(message)
        self.tensor_name = tensor_name
