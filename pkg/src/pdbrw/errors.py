"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A parameter is outside the domain where the quantity is defined."""


class ResourceCapError(RuntimeError):
    """A request would exceed a configured resource cap (memory/point count)."""
