"""Exception types shared across the package."""


class TreeBootError(Exception):
    """Base class for all package-specific errors."""


class ExpressionSyntaxError(TreeBootError):
    """Malformed expression text."""


class DomainError(TreeBootError):
    """An operation was evaluated outside its mathematical domain."""

    def __init__(self, message, vertex=None):
        super().__init__(message if vertex is None else f"vertex {vertex}: {message}")
        self.vertex = vertex


class TreeDocumentError(TreeBootError):
    """A tree document could not be read (malformed text or bad field)."""


class TreeValidationError(TreeBootError):
    """A calculation tree violates structural invariants."""

    def __init__(self, violations):
        self.violations = tuple(violations)
        super().__init__(
            "invalid calculation tree: " + "; ".join(str(v) for v in self.violations)
        )


class InfeasibleError(TreeBootError):
    """The budget cannot cover the minimal feasible allocation."""


class SearchSpaceError(TreeBootError):
    """Brute-force enumeration would exceed the configured guard."""
