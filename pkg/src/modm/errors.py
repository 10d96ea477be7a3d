"""Exception types shared across the package."""


class ModmError(Exception):
    """Base class for package-specific failures."""


class ValidationError(ModmError):
    """A domain-type invariant is violated."""


class GridMismatchError(ModmError):
    """Inputs sampled on incompatible polar grids or bandlimits."""


class InvalidDistributionError(ModmError):
    """Orientation density unusable for sampling (negative, or envelope breached)."""


class IllPosedError(ModmError):
    """A linear inversion is too badly conditioned to trust."""


class NonConvergenceError(ModmError):
    """Iterative solve ended without meeting its tolerance."""
