"""Exception hierarchy shared by all glucoloop modules."""


class GlucoLoopError(Exception):
    """Base class for every error raised by this package."""


class NumericInputError(GlucoLoopError, ValueError):
    """A state, parameter or input contains NaN/inf."""


class IntegrationError(GlucoLoopError):
    """The ODE integration diverged."""

    def __init__(self, message: str, time: float):
        super().__init__(f"{message} (t = {time:g} min)")
        self.time = time


class SolverError(GlucoLoopError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual = {residual:.3e})")
        self.residual = residual


class SampleSizeError(GlucoLoopError, ValueError):
    """Not enough samples to build a set with the requested guarantee."""

    def __init__(self, message: str, coordinates=()):
        super().__init__(message)
        self.coordinates = tuple(coordinates)


class ConfigError(GlucoLoopError, ValueError):
    """Malformed parameter, scenario or run configuration."""
