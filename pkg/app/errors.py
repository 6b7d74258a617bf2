"""
Error Types
===========
One hierarchy for every failure the toolkit raises on purpose. The CLI maps
any ToolkitError to exit code 2 (usage/config/input problem); verification
failures are reported as data, not raised.
"""

from typing import Optional


class ToolkitError(Exception):
    """Base class for all deliberate toolkit failures."""


class InvalidInputError(ToolkitError, ValueError):
    """A precondition on an argument does not hold."""


class ShapeMismatchError(InvalidInputError):
    """Array shapes disagree."""


class GuardExceededError(ToolkitError):
    """A size guard on a dense or enumerative computation was exceeded."""


class SingularSystemError(ToolkitError):
    """A linear system could not be factorized reliably."""

    def __init__(self, message: str, condition_number: Optional[float] = None):
        super().__init__(message)
        self.condition_number = condition_number


class IllegalActionError(ToolkitError):
    """An action is not in the legal action set of the state."""


class TerminalStateError(ToolkitError):
    """The operation needs a non-terminal state."""


class InfeasibleConfigError(ToolkitError):
    """A generation config cannot produce a valid instance."""


class InsufficientDataError(ToolkitError):
    """Not enough data points for a fit or comparison."""


class NonScalarLossError(ToolkitError):
    """Backward pass requested from a non-scalar node."""


class ThreadPinningError(ToolkitError):
    """Timing could not be restricted to a single thread."""


class OracleMismatchError(ToolkitError):
    """A fast mechanism disagrees with its dense oracle."""
