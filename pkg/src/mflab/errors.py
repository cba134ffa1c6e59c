"""Exception types shared across the package.

The CLI maps GuardViolation to exit code 2 and NumericalAbort to exit code 3.
"""


class GuardViolation(ValueError):
    """A pre-flight check (resolution, memory, horizon, range) failed."""


class NumericalAbort(RuntimeError):
    """A run produced non-finite values or drifted past its abort threshold."""
