"""Exception types shared across the package."""


class SolverError(RuntimeError):
    """An iterative solver failed: lost bracket, stagnated, or hit its budget."""


class ConfigError(ValueError):
    """A run configuration is malformed or violates a resolution guard."""


class CheckError(RuntimeError):
    """A verification assertion on computed results failed."""
