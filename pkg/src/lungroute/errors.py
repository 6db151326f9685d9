"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: ValidationError (and
subclasses) exit 1, everything else that escapes a command exits 2.
"""


class LungRouteError(Exception):
    """Base class for all package errors."""


class ValidationError(LungRouteError):
    """Rejected input or configuration (bad shapes, labels, counts, paths)."""


class FormatError(ValidationError):
    """Malformed file: wrong magic, version, or truncated payload."""


class DivergenceError(LungRouteError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, lr: float):
        self.step = step
        self.lr = lr
        super().__init__(f"non-finite loss at step {step} (lr={lr:.3e})")
