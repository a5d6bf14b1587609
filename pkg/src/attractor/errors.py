"""Exception types shared across the package."""

from __future__ import annotations


class AttractorError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AttractorError, ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, message: str, *shapes):
        self.shapes = shapes
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class ContractError(AttractorError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(AttractorError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class TargetIndexError(AttractorError, IndexError):
    """A class target lies outside ``[0, V)`` and is not the ignore index."""


class ConfigError(AttractorError, ValueError):
    """Invalid configuration; ``key`` names the offending dotted key."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")
