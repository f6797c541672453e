"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """An input or output contains NaN or Inf."""


class EmptyContextError(ValueError):
    """Attention was requested over zero keys."""


class InvariantError(ValueError):
    """A structural invariant of a domain type was violated."""


class FormatError(ValueError):
    """A tensor file is malformed."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown or invalid.

    ``key`` names the offending configuration key when one is known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
