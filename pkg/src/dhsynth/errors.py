"""Exception hierarchy shared by all modules."""


class DhsynthError(Exception):
    """Base class for every error raised by the package."""


class GeometryError(DhsynthError):
    pass


class ModelError(DhsynthError):
    """Invalid model description; ``path`` locates the offending field."""

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class EvaluationError(DhsynthError):
    """Right-hand side evaluation left its domain (for example a division by zero)."""


class CertificationFailure(DhsynthError):
    """A mode could not be certified ball-convergent."""


class IntegrationError(DhsynthError):
    """Numerical integration failed (non-finite values or step underflow)."""


class EmptyInvariant(DhsynthError):
    """No safe invariant: a reach branch left the safe set, or the attractor ball crosses it."""


class SynthesisFailure(DhsynthError):
    """Synthesis did not produce a controller; ``partial`` holds the last state."""

    def __init__(self, message, partial=None):
        self.partial = partial
        super().__init__(message)


class EmptyGuard(SynthesisFailure):
    """Some refined guard is empty at the fixed point."""
