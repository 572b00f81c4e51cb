"""Exception types raised across the package."""


class DpaError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(DpaError, ValueError):
    pass


class SpatialSizeMismatch(ShapeMismatch):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class NonFiniteValue(DpaError, FloatingPointError):
    pass


class NotScalarLoss(DpaError, ValueError):
    pass


class InvalidAlpha(DpaError, ValueError):
    pass


class LabelOutOfRange(DpaError, ValueError):
    pass


class DegenerateBatch(DpaError, ValueError):
    pass


class ParseError(DpaError, ValueError):
    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.field = field


class MissingImage(DpaError, FileNotFoundError):
    pass


class NonDenseIdentityIds(DpaError, ValueError):
    pass


class InsufficientIdentities(DpaError, ValueError):
    pass


class NoValidMatch(DpaError, ValueError):
    def __init__(self, queries):
        self.queries = list(queries)
        super().__init__(f"queries without a valid gallery match: {self.queries}")


class ConfigInvalid(DpaError, ValueError):
    pass


class CheckpointMismatch(DpaError, ValueError):
    pass
