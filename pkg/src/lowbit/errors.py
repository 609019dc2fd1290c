"""Exception types shared across the package."""


class LowbitError(Exception):
    """Base class for all errors raised by lowbit."""


class ShapeError(LowbitError, ValueError):
    """Tensor extents or layer geometry are inconsistent."""


class DataError(LowbitError, ValueError):
    """Element values are outside what an operation accepts."""


class ConfigError(LowbitError, ValueError):
    """Invalid configuration parameter (bit widths, budgets, fractions)."""


class ValidationError(LowbitError):
    """A graph failed validation. ``violations`` holds the individual findings."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations) or "invalid graph")
