"""Exception types shared across the package."""


class LcsidError(Exception):
    """Base class for package errors."""


class SolverError(LcsidError):
    """A numerical solver failed to converge or hit a degenerate instance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class GammaWindowError(LcsidError, ValueError):
    """gamma is outside the open interval (0, min-eig(F + F^T))."""

    def __init__(self, gamma, min_eig):
        super().__init__(
            f"gamma={gamma!r} outside the valid window (0, {min_eig!r})"
        )
        self.gamma = gamma
        self.min_eig = min_eig


class DegenerateSolutionError(LcsidError):
    """Strict complementarity fails where differentiation requires it."""


class FormatError(LcsidError, ValueError):
    """A serialized file does not match the expected layout."""
