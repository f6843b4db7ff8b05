"""Exception hierarchy shared by every ftwist module."""


class FtwistError(Exception):
    """Base class for all ftwist errors."""


class OrderOverflowError(FtwistError, ValueError):
    """Requested derivative order exceeds the configured maximum."""


class DomainError(FtwistError):
    """A stencil or integration point left the smooth domain of a metric."""


class DegeneracyError(FtwistError):
    """Fundamental tensor is singular or not positive definite."""

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class DegenerateFlagError(FtwistError):
    """Flag plane spanned by a flagpole and a transverse vector is degenerate."""


class ConstructionError(FtwistError, ValueError):
    """A metric or twist specification violates one of its declared bounds."""


class ConfigError(FtwistError, ValueError):
    """Malformed run configuration."""
