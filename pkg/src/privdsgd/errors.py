"""Exception types shared across the simulator."""


class PrivDsgdError(Exception):
    """Base class for all library errors."""


class ConfigError(PrivDsgdError):
    """Invalid or inconsistent experiment configuration."""


class DisconnectedGraph(PrivDsgdError):
    """The agent interaction graph is not connected."""


class InvalidAgentIndex(PrivDsgdError):
    """An edge endpoint or agent id is outside [1..m]."""


class AssumptionViolated(PrivDsgdError):
    """A coupling matrix fails the doubly-stochastic / spectral-radius contract.

    Carries the offending spectral radius as ``rho``.
    """

    def __init__(self, rho: float, message: str | None = None):
        self.rho = rho
        super().__init__(message or f"spectral radius {rho!r} is not < 1")


class DimensionMismatch(PrivDsgdError):
    """State, coupling matrix and problem dimensions disagree."""


class SingularSystem(PrivDsgdError):
    """The aggregate normal equations are singular or too ill-conditioned."""


class DegenerateLaw(PrivDsgdError):
    """An obfuscation law with zero stepsize mass has no finite joint entropy."""


class QuadratureFailure(PrivDsgdError):
    """Numerical integration error estimate exceeded the accepted tolerance."""


class ZeroStepsize(PrivDsgdError):
    """The public baseline stepsize is zero; gradient inversion is undefined."""


class MissingMessages(PrivDsgdError):
    """The message log lacks entries the observation model requires."""
