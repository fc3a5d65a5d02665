"""Shared exception types.

ValidationError covers malformed inputs and contract violations (bad
shapes, out-of-range values, unparseable serialized data).  InfeasibleError
covers bounded-retry procedures that ran out of attempts, e.g. packing
regions into a scene or placing a guest object next to a host.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition or format."""


class InfeasibleError(RuntimeError):
    """A randomized placement/packing procedure exhausted its retry budget."""
