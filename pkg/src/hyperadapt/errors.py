"""Exception classes shared across the package.

Exit-code mapping for the CLI lives in cli.py: InputError/ConfigError are
usage-class failures (exit 2), InternalInvariantError is exit 3.
"""


class HyperadaptError(Exception):
    """Base class for all package errors."""


class ShapeError(HyperadaptError):
    """Operand shapes are incompatible for an op.

    Message always names the op and the offending axes.
    """

    def __init__(self, op, message):
        self.op = op
        super().__init__(f"{op}: {message}")


class InputError(HyperadaptError):
    """Caller passed invalid data (empty input, out-of-range id, non-finite value)."""


class ConfigError(HyperadaptError):
    """Invalid or inconsistent configuration."""


class StateError(HyperadaptError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class NumericsError(HyperadaptError):
    """Non-finite value produced where a finite one is required."""


class InfeasibleAlignmentError(InputError):
    """Monotonic complete alignment impossible (fewer frames than phonemes)."""


class InternalInvariantError(HyperadaptError):
    """A guaranteed invariant was violated; indicates a bug, not bad input."""
