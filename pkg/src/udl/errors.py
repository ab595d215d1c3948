"""Exception types raised across the package."""


class UDLError(Exception):
    """Base class for all package errors."""


class ShapeError(UDLError, ValueError):
    """Operand shapes are inconsistent."""

    def __init__(self, what, expected, got):
        self.expected = tuple(expected) if expected is not None else None
        self.got = tuple(got)
        super().__init__(f"{what}: expected shape {self.expected}, got {self.got}")


class DivergenceError(UDLError, ArithmeticError):
    """An iterate became non-finite or exceeded the divergence guard."""

    def __init__(self, iteration, norm):
        self.iteration = iteration
        self.norm = norm
        super().__init__(f"iterate diverged at iteration {iteration} (norm={norm:.3e})")


class SingularSupportError(UDLError, ArithmeticError):
    """The Gram matrix restricted to the support is not invertible."""

    def __init__(self, cond):
        self.cond = cond
        super().__init__(f"support Gram matrix is singular (condition number {cond:.3e})")


class UnstableGradientError(UDLError, ArithmeticError):
    """A gradient estimate contains non-finite entries."""


class FormatError(UDLError, ValueError):
    """A binary file does not follow its declared format."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ConfigError(UDLError, ValueError):
    """An experiment configuration is invalid."""
