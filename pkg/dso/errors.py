"""Exception hierarchy shared by the library and the experiment harness."""

from typing import Optional


class DsoError(Exception):
    """Base class for every error raised by the dso package."""


class InvalidStructureError(DsoError):
    """A chain, cost or problem was assembled from inconsistent pieces."""


class DivergenceUndefinedError(DsoError):
    """A KL divergence was requested where absolute continuity fails."""


class ReachabilityError(DsoError):
    """Some state cannot reach the terminal set, so first-exit sums diverge."""


class ErgodicityError(DsoError):
    """The chain has no unique, full-support stationary distribution."""


class CapabilityError(DsoError):
    """A model lacks an accessor (bottleneck, second derivatives, ...) an operation needs."""


class ProbeError(DsoError):
    """A finite-difference probe produced a non-finite objective."""

    def __init__(self, message: str, coordinate: Optional[int] = None):
        super().__init__(message)
        self.coordinate = coordinate


class StalenessError(DsoError):
    """A rollout batch was used with parameters it was not generated under."""


class SpectralError(DsoError):
    """Power iteration failed to converge."""


class RegularizationRequiredError(DsoError):
    """Least-squares normal equations are rank deficient and no ridge was given."""


class ConfigError(DsoError):
    """Invalid experiment configuration; `path` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
