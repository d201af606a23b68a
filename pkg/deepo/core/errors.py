"""
Exception hierarchy for the DeePO library.

Numerical failures derive from ``NumericalError`` so callers (the CLI in
particular) can tell them apart from configuration and schema problems.
"""
from typing import Any, Dict, Optional


class DeepoError(Exception):
    """Base class for every error raised by the package."""

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "message": str(self), **self.details}


class NumericalError(DeepoError):
    pass


class SpectralRadiusError(NumericalError):
    """The closed-loop matrix is not strictly inside the stability margin."""


class ConvergenceError(NumericalError):
    """An iterative kernel did not reach its tolerance."""


class NotStabilizableError(NumericalError):
    """Riccati iterates diverged or produced a non-stabilizing gain."""


class RankDeficientError(NumericalError):
    def __init__(self, message: str, sigma_min: Optional[float] = None, **details: Any):
        super().__init__(message, sigma_min=sigma_min, **details)
        self.sigma_min = sigma_min


class SingularUpdateError(NumericalError):
    """Sherman-Morrison denominator collapsed."""


class DivergenceError(NumericalError):
    """A simulated state exceeded the overflow guard."""


class StepRejectedError(NumericalError):
    """Backtracking shrank the stepsize below the floor."""


class InfeasibleError(NumericalError):
    """No feasible (stabilizing) policy exists for the data at hand."""


class DegenerateError(NumericalError):
    pass


class InsufficientDataError(NumericalError):
    pass


class DestabilizedError(NumericalError):
    """A learned gain failed to stabilize the true plant during evaluation."""


class GenerationError(DeepoError):
    """Rejection sampling exhausted its attempts."""


class MissingNoiseError(DeepoError):
    """A diagnostic needs the recorded noise matrix W0."""


class SchemaError(DeepoError):
    """Traces or CSV files do not share a column schema."""


class ExperimentConfigError(DeepoError):
    pass


__all__ = [
    "DeepoError",
    "NumericalError",
    "SpectralRadiusError",
    "ConvergenceError",
    "NotStabilizableError",
    "RankDeficientError",
    "SingularUpdateError",
    "DivergenceError",
    "StepRejectedError",
    "InfeasibleError",
    "DegenerateError",
    "InsufficientDataError",
    "DestabilizedError",
    "GenerationError",
    "MissingNoiseError",
    "SchemaError",
    "ExperimentConfigError",
]
