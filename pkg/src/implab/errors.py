"""Exception hierarchy shared by every implab module.

The CLI maps these onto process exit codes: ConfigError -> 1,
NumericalError (and subclasses) -> 2, CacheCorruptionError -> 3.
"""


class ImplabError(Exception):
    """Base class for all implab errors."""


class ConfigError(ImplabError):
    """Bad configuration: unknown key, wrong type, inadmissible value."""


class GeometryError(ConfigError):
    """Inconsistent geometric request (empty patch, non-nested annuli, ...)."""


class NumericalError(ImplabError):
    """A numerical stage failed; carries the stage name for the CLI."""

    def __init__(self, message, stage=""):
        super().__init__(message)
        self.stage = stage


class SolverConvergenceError(NumericalError):
    """Iterative linear solve did not reach the requested tolerance."""

    def __init__(self, message, iterations=0, residual=float("nan")):
        super().__init__(message, stage="solver")
        self.iterations = iterations
        self.residual = residual


class ContractionError(NumericalError):
    """Fixed-point iteration for the scattering remainder is not contracting."""

    def __init__(self, message, rate=float("nan")):
        super().__init__(message, stage="cgo")
        self.rate = rate


class MultiplierError(NumericalError):
    """The shifted frequency lattice hit (or came too close to) a symbol zero."""

    def __init__(self, message):
        super().__init__(message, stage="cgo")


class WeightConstructionError(NumericalError):
    """No admissible Carleman weight found within the retry budget."""

    def __init__(self, message, failed_property="", location=None):
        super().__init__(message, stage="carleman")
        self.failed_property = failed_property
        self.location = location


class RangeError(NumericalError):
    """Exponential weight under/overflows double precision even after scaling."""

    def __init__(self, message, stage="carleman"):
        super().__init__(message, stage=stage)


class CacheCorruptionError(ImplabError):
    """Content hash of a cached artifact does not match its sidecar."""
