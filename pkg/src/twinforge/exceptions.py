"""Exception hierarchy shared by every twinforge module."""


class TwinforgeError(Exception):
    """Base class for all package errors."""


class ValidationError(TwinforgeError, ValueError):
    """Bad input: wrong arguments, malformed data, failed preconditions."""


class SchemaError(ValidationError):
    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"missing required column {column!r}")


class NormalizationError(ValidationError):
    def __init__(self, feature):
        self.feature = feature
        super().__init__(f"feature {feature!r} has zero range on the training split")


class DimensionError(ValidationError):
    """Array shape does not match what a layer or model expects."""


class NumericError(TwinforgeError, ArithmeticError):
    def __init__(self, message, batch_index=None):
        self.batch_index = batch_index
        super().__init__(message)


class TrainingError(NumericError):
    def __init__(self, message, epoch):
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})")


class NotFoundError(TwinforgeError, LookupError):
    pass


class AuthorizationError(TwinforgeError, PermissionError):
    pass


class StateError(TwinforgeError):
    """Operation is valid but the current state does not allow it."""
