"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid parameters or inconsistent configuration."""


class NumericalError(RuntimeError):
    """A solver failed (non-SPD pivot, CG stagnation, non-finite data)."""
