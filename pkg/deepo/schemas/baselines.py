"""
Models for the comparison methods: recursive least squares and zeroth-order
policy optimization.
"""
from typing import Optional

from pydantic import ConfigDict, Field

from deepo.schemas.base import DeepoBaseModel, Matrix
from deepo.schemas.data import NoiseModel


class RlsState(DeepoBaseModel):
    """
    Recursive least-squares estimate Theta_hat = [B_hat, A_hat] and the
    inverse of the (forgetting-weighted) information matrix sum psi psi'.
    """
    Theta_hat: Matrix = Field(..., description="n x (m+n) estimate [B_hat, A_hat]")
    PhiInv: Matrix = Field(..., description="(m+n) x (m+n) inverse information matrix")
    t: int = Field(..., ge=1)
    forgetting: float = Field(default=1.0, gt=0.0, le=1.0)


class ZoConfig(DeepoBaseModel):
    """Two-point zeroth-order policy optimization settings."""
    r: float = Field(default=0.02, gt=0.0, description="Smoothing radius")
    eta: float = Field(default=1e-3, gt=0.0, description="Stepsize")
    T_rollout: int = Field(default=50, ge=1, description="Rollout length for C_hat")
    minibatch: int = Field(default=30, ge=1, description="Two-point samples per iteration")
    max_iters: int = Field(default=20000, ge=1, description="Iteration budget")
    noise: NoiseModel = Field(default_factory=lambda: NoiseModel.gaussian(0.1))
    seed: int = 0

    model_config = ConfigDict(extra="forbid")


class ComplexityRow(DeepoBaseModel):
    """One row of the sample-complexity table."""
    target_eps: float
    trajectories: Optional[int] = Field(
        default=None, description="Zeroth-order rollouts used when the target was first met"
    )
    pairs: Optional[int] = Field(
        default=None, description="Input-state pairs used by DeePO when the target was first met"
    )
    seed: Optional[int] = None
