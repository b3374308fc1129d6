"""
Exception hierarchy for qbus.

Every error raised by the package derives from QbusError. Validation
failures also derive from ValueError and numerical failures from
RuntimeError, so callers written against the builtins keep working.
"""

from typing import Optional


class QbusError(Exception):
    """Base class for all qbus errors."""


class ValidationError(QbusError, ValueError):
    """A physical parameter or configuration value is out of its domain."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class ConfigParseError(ValidationError):
    """Config text could not be parsed."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class UnboundedPotentialError(ValidationError):
    """Pulse index lies in the unbounded-potential regime."""

    def __init__(self, m: float, kind: str):
        super().__init__(
            f"{kind} pulse index m={m} < 2: unbounded potential trap "
            f"(imaginary eigenfrequency, diverging excitation number)",
            key="m",
        )
        self.m = m


class UnreachableToleranceError(QbusError, ValueError):
    """Requested error tolerance cannot be met for any m in the search range."""


class DimensionError(QbusError, ValueError):
    """Basis, operator or state dimensions do not match, or exceed the dense-matrix limit."""


class TruncationError(QbusError, RuntimeError):
    """Population reached the top Fock level of a mode beyond tolerance."""

    def __init__(self, mode: str, tail: float, limit: float):
        super().__init__(
            f"truncation tail in mode {mode} is {tail:.3e} > {limit:.1e}; "
            f"increase the Fock cutoff"
        )
        self.mode = mode
        self.tail = tail
        self.limit = limit


class StepSizeError(QbusError, RuntimeError):
    """Integrator step too coarse for the fastest eigenfrequency."""
