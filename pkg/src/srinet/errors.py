"""Exception types shared across the package."""


class SrinetError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SrinetError, ValueError):
    """Input violates a documented precondition (shape, range, emptiness)."""


class DegenerateInputError(SrinetError, ValueError):
    """Geometrically degenerate input: unresolvable ties, collinear axes,
    rank-deficient neighborhoods."""


class InconsistentFeatureError(SrinetError, ValueError):
    """A projection feature has no consistent preimage under the given axes."""


class InvalidStateError(SrinetError, RuntimeError):
    """Operation called with stale or mismatched cached state."""


class TrainingDivergedError(SrinetError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class ParseError(SrinetError, ValueError):
    """Malformed geometry file; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
