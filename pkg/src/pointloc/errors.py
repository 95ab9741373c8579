"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class ValidationError(ValueError):
    """A value-level precondition (normalization, config, range) is violated."""


class DataError(RuntimeError):
    """Problem with on-disk data: datasets, checkpoints, stores, images."""
