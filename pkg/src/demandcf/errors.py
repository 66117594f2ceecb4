"""Exception types shared across the package."""


class DemandCFError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(DemandCFError, ValueError):
    """Shapes or block layouts are inconsistent."""


class DecompositionError(DemandCFError, ValueError):
    """A matrix factorization failed (e.g. non-PD input to a Cholesky)."""


class RankError(DemandCFError, ValueError):
    """A matrix violates a rank or conditioning requirement."""


class ConvergenceError(DemandCFError, RuntimeError):
    """An iterative solver failed to reach its tolerance."""


class ValidationError(DemandCFError, ValueError):
    """Input data or configuration violates a documented invariant."""
