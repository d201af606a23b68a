"""
Plant and gain models.
"""
from typing import Optional

import numpy as np
from pydantic import ConfigDict, Field, model_validator

from deepo.schemas.base import DeepoBaseModel, Matrix


def _is_spd(M: np.ndarray) -> bool:
    if M.shape[0] != M.shape[1]:
        return False
    scale = max(1.0, float(np.max(np.abs(M))))
    if not np.allclose(M, M.T, atol=1e-12 * scale, rtol=0.0):
        return False
    return bool(np.min(np.linalg.eigvalsh((M + M.T) / 2)) > 0)


class LinearSystem(DeepoBaseModel):
    """
    Ground-truth plant x+ = A x + B u + w with LQR weights (Q, R).
    """
    A: Matrix = Field(..., description="n x n dynamics matrix")
    B: Matrix = Field(..., description="n x m input matrix")
    Q: Matrix = Field(..., description="n x n positive definite state weight")
    R: Matrix = Field(..., description="m x m positive definite input weight")

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def validate_shapes(self) -> "LinearSystem":
        n, m = self.B.shape
        if self.A.shape != (n, n):
            raise ValueError(f"A must be {n}x{n}, got {self.A.shape}")
        if self.Q.shape != (n, n):
            raise ValueError(f"Q must be {n}x{n}, got {self.Q.shape}")
        if self.R.shape != (m, m):
            raise ValueError(f"R must be {m}x{m}, got {self.R.shape}")
        if not _is_spd(self.Q):
            raise ValueError("Q must be symmetric positive definite")
        if not _is_spd(self.R):
            raise ValueError("R must be symmetric positive definite")
        return self

    @property
    def n(self) -> int:
        return int(self.A.shape[0])

    @property
    def m(self) -> int:
        return int(self.B.shape[1])

    def closed_loop(self, K: np.ndarray) -> np.ndarray:
        return self.A + self.B @ K


class GainK(DeepoBaseModel):
    """
    State-feedback gain u = K x, optionally tagged with its stability status
    under a specific plant.
    """
    K: Matrix = Field(..., description="m x n gain matrix")
    stable: Optional[bool] = Field(
        default=None,
        description="rho(A + BK) < 1 - margin under the plant it was checked against",
    )
    rho: Optional[float] = Field(default=None, description="Closed-loop spectral radius")
