class DdpopError(Exception):
    """Base class for package errors."""


class ModelError(DdpopError, ValueError):
    """Invalid model definition (rates, channels, domain)."""


class DomainError(DdpopError, ValueError):
    """A state lies outside the model domain."""


class SimulationError(DdpopError, RuntimeError):
    pass


class IntegrationError(DdpopError, RuntimeError):
    """ODE integration failed; ``t_last`` is the last successfully reached time."""

    def __init__(self, message: str, t_last: float | None = None):
        super().__init__(message)
        self.t_last = t_last


class ControlError(DdpopError, ValueError):
    pass
