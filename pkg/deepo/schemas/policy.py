"""
Covariance-parameterized policy models and optimization records.
"""
import math
from typing import Optional

import numpy as np
from pydantic import Field

from deepo.schemas.base import DeepoBaseModel, Matrix

# Offline trace CSV: the DescentRecord fields plus rel_gap = (J - J*) / J*, the
# relative gap to the certainty-equivalence optimum of the same batch.
OFFLINE_TRACE_COLUMNS = ["iter", "J", "rel_gap", "proj_grad_norm", "rho_X1V", "eta_used"]


class Eigenbasis(DeepoBaseModel):
    """
    Eigendecomposition M = vectors diag(values) inverse of a real square
    matrix. ``inverse`` is None when the eigenvector matrix is singular.
    """
    values: np.ndarray
    vectors: np.ndarray
    inverse: Optional[np.ndarray] = None

    @property
    def rho(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    @property
    def diagonalizable(self) -> bool:
        return self.inverse is not None

    def transpose(self) -> "Eigenbasis":
        """Basis of M' = inverse' diag(values) vectors'."""
        if self.inverse is None:
            return self
        return Eigenbasis(values=self.values, vectors=self.inverse.T, inverse=self.vectors.T)


class PolicyV(DeepoBaseModel):
    """
    Covariance parameterization V of a gain, with [K; I] = Phi V.

    ``feasible`` means X0_bar V = I_n (within cons_tol) and rho(X1_bar V) is
    inside the stability margin. ``closed_loop`` keeps the eigendecomposition
    of X1_bar V for the Lyapunov solves of J(V) and its derivatives.
    """
    V: Matrix = Field(..., description="(m+n) x n policy")
    feasible: bool = Field(..., description="Membership of the feasible set S")
    rho: float = Field(..., description="Spectral radius of X1_bar V")
    constraint_residual: float = Field(..., description="max |X0_bar V - I_n|")
    closed_loop: Optional[Eigenbasis] = Field(default=None, exclude=True, repr=False)


class CostBundle(DeepoBaseModel):
    """
    Data-driven cost J(V) = Tr(P_V) and the two Lyapunov solutions behind it.
    J is +inf (and the matrices are None) for infeasible policies.
    """
    J: float
    P_V: Optional[Matrix] = None
    Sigma_V: Optional[Matrix] = None

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.J)


class DescentRecord(DeepoBaseModel):
    """One row of the offline optimization trace."""
    iter: int
    J: float
    proj_grad_norm: float
    rho_X1V: float
    eta_used: float


class EquivalenceReport(DeepoBaseModel):
    J_star: float = Field(..., description="Optimum of the covariance-parameterized problem")
    C_ce_star: float = Field(..., description="Certainty-equivalence optimal cost")
    gap: float = Field(..., description="|J_star - C_ce_star|")


class TheoryConstants(DeepoBaseModel):
    mu: float = Field(..., description="Projected gradient dominance constant mu(a)")
    l: float = Field(..., description="Local smoothness constant l(a)")  # noqa: E741
