"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes of two grids (or a rect and its parent) are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values (divergence, bad weights)."""


class ConfigError(ValueError):
    """A run configuration is malformed or violates the schema."""


class StageError(RuntimeError):
    """A pipeline stage cannot run, typically because an input artifact is missing."""
