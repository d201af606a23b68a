"""
Configuration and running state of the online (adaptive) learners.
"""
from typing import List, Optional

import numpy as np
from pydantic import Field, model_validator

from deepo.schemas.base import DeepoBaseModel, Matrix, Vector
from deepo.schemas.data import CovarianceState, NoiseModel
from deepo.schemas.policy import PolicyV
from deepo.schemas.system import GainK, LinearSystem


class PlantSwitch(DeepoBaseModel):
    """Replace the true plant by ``system`` from time index ``at`` on."""
    at: int = Field(..., ge=0)
    system: LinearSystem


class AdaptiveConfig(DeepoBaseModel):
    """
    Parameters of one closed-loop learning run.

    The offline batch of ``t0`` samples uses ``offline_input`` as open-loop
    excitation from x0 = 0; online inputs are u_t = K_t x_t + v_t with v_t
    drawn from ``probe``.
    """
    t0: int = Field(..., ge=1, description="Length of the offline batch")
    T: int = Field(..., ge=1, description="Number of online steps")
    eta: float = Field(default=0.01, ge=0.0, description="Online stepsize")
    probe: NoiseModel = Field(
        default_factory=lambda: NoiseModel.gaussian(1.0),
        description="Probing noise v_t",
    )
    offline_input: NoiseModel = Field(
        default_factory=lambda: NoiseModel.gaussian(1.0),
        description="Open-loop excitation of the offline batch",
    )
    noise: NoiseModel = Field(default_factory=NoiseModel.none, description="Process noise w_t")
    offline_noise: Optional[NoiseModel] = Field(
        default=None,
        description="Process noise during the offline batch; ``noise`` when None",
    )
    forgetting: float = Field(default=1.0, gt=0.0, le=1.0)
    seed: int = 0
    initial_gain: Optional[Matrix] = Field(
        default=None,
        description="Override for K_{t0}; the certainty-equivalence gain otherwise",
    )

    @property
    def batch_noise(self) -> NoiseModel:
        return self.offline_noise if self.offline_noise is not None else self.noise


class AdaptiveState(DeepoBaseModel):
    """
    Everything the direct learner carries from one sample to the next.

    K_t equals U_bar V'_t after every step and ``cov.t`` equals ``t``.
    """
    cov: CovarianceState
    K_t: GainK
    V_t_prime: PolicyV
    t: int = Field(..., ge=1)
    eta: float = Field(..., ge=0.0)
    probe: NoiseModel
    forgetting: float = Field(default=1.0, gt=0.0, le=1.0)
    seed: int = 0
    x: Vector = Field(..., description="Current state x_t")
    noise_gram: Matrix = Field(..., description="Sum of w w' over the data seen so far")
    stage_cost: float = Field(default=float("nan"), description="||z||^2 of the last step")
    gain_step: float = Field(default=0.0, description="||K_t - K_{t-1}||_F")
    events: List[str] = Field(default_factory=list, description="Events of the last step")

    @model_validator(mode="after")
    def validate_consistency(self) -> "AdaptiveState":
        if self.cov.t != self.t:
            raise ValueError(f"covariance holds {self.cov.t} samples, state is at t={self.t}")
        if self.x.shape != (self.cov.n,):
            raise ValueError(f"x must have {self.cov.n} entries")
        return self

    @property
    def sigma_min_D0(self) -> float:
        """sigma_min(D0) recovered from the (weighted) covariance, sqrt(t lambda_min(Phi))."""
        lam = float(np.min(np.linalg.eigvalsh(self.cov.Phi)))
        return float(np.sqrt(max(lam, 0.0) * self.t))

    @property
    def noise_norm(self) -> float:
        return float(np.sqrt(max(np.max(np.linalg.eigvalsh(self.noise_gram)), 0.0)))
