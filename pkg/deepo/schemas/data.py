"""
Data models: noise descriptions, raw data batches and running covariances.
"""
from typing import Literal, Optional

import numpy as np
from pydantic import ConfigDict, Field, model_validator

from deepo.schemas.base import DeepoBaseModel, Matrix

NoiseKind = Literal["none", "uniform", "gaussian", "adversarial"]
AdversarialStrategy = Literal["aligned", "constant", "sphere"]


class NoiseModel(DeepoBaseModel):
    """
    Description of a disturbance or probing sequence.

    ``uniform`` draws every entry from [0, sigma] (non-zero mean),
    ``gaussian`` draws N(0, sigma^2 I) and ``adversarial`` keeps
    ||w_t|| <= delta with the chosen strategy.
    """
    kind: NoiseKind = Field(default="none", description="Noise family")
    sigma: float = Field(default=0.0, ge=0.0, description="Scale for uniform/gaussian")
    delta: float = Field(default=0.0, ge=0.0, description="Norm bound for adversarial")
    strategy: AdversarialStrategy = Field(
        default="sphere", description="Direction rule for adversarial noise"
    )
    seed: int = Field(default=0, description="Stream seed when no generator is supplied")

    model_config = ConfigDict(extra="forbid")

    @classmethod
    def none(cls) -> "NoiseModel":
        return cls(kind="none")

    @classmethod
    def uniform(cls, sigma: float, seed: int = 0) -> "NoiseModel":
        return cls(kind="uniform", sigma=sigma, seed=seed)

    @classmethod
    def gaussian(cls, sigma: float, seed: int = 0) -> "NoiseModel":
        return cls(kind="gaussian", sigma=sigma, seed=seed)

    @classmethod
    def adversarial(
        cls, delta: float, strategy: AdversarialStrategy = "sphere", seed: int = 0
    ) -> "NoiseModel":
        return cls(kind="adversarial", delta=delta, strategy=strategy, seed=seed)

    @property
    def is_silent(self) -> bool:
        if self.kind == "none":
            return True
        if self.kind == "adversarial":
            return self.delta == 0.0
        return self.sigma == 0.0


class DataBatch(DeepoBaseModel):
    """
    t-long input/state data X0, U0, X1 (and the noise W0 when it is known).
    """
    X0: Matrix = Field(..., description="n x t states x_0..x_{t-1}")
    U0: Matrix = Field(..., description="m x t inputs u_0..u_{t-1}")
    X1: Matrix = Field(..., description="n x t successor states x_1..x_t")
    W0: Optional[Matrix] = Field(default=None, description="n x t noise (diagnostics only)")

    @model_validator(mode="after")
    def validate_columns(self) -> "DataBatch":
        t = self.X0.shape[1]
        members = {"U0": self.U0, "X1": self.X1}
        if self.W0 is not None:
            members["W0"] = self.W0
        for name, value in members.items():
            if value.shape[1] != t:
                raise ValueError(f"{name} has {value.shape[1]} columns, X0 has {t}")
        if self.X1.shape[0] != self.X0.shape[0]:
            raise ValueError("X0 and X1 must have the same number of rows")
        if self.W0 is not None and self.W0.shape[0] != self.X0.shape[0]:
            raise ValueError("W0 and X0 must have the same number of rows")
        return self

    @property
    def t(self) -> int:
        return int(self.X0.shape[1])

    @property
    def n(self) -> int:
        return int(self.X0.shape[0])

    @property
    def m(self) -> int:
        return int(self.U0.shape[0])

    @property
    def D0(self) -> np.ndarray:
        return np.vstack([self.U0, self.X0])


class CovarianceState(DeepoBaseModel):
    """
    Running sample covariances of the input-state data. This is the only
    memory of past data that the direct methods keep.
    """
    U_bar: Matrix = Field(..., description="m x (m+n), U0 D0^T / t")
    X0_bar: Matrix = Field(..., description="n x (m+n), X0 D0^T / t")
    X1_bar: Matrix = Field(..., description="n x (m+n), X1 D0^T / t")
    Phi: Matrix = Field(..., description="(m+n) x (m+n), D0 D0^T / t")
    Phi_inv: Matrix = Field(..., description="inverse of Phi")
    t: int = Field(..., ge=1, description="Number of samples")
    forgetting: float = Field(default=1.0, gt=0.0, le=1.0)
    updates_since_refresh: int = Field(default=0, ge=0)

    @property
    def n(self) -> int:
        return int(self.X0_bar.shape[0])

    @property
    def m(self) -> int:
        return int(self.U_bar.shape[0])

    def inverse_drift(self) -> float:
        eye = np.eye(self.Phi.shape[0])
        return float(np.max(np.abs(self.Phi @ self.Phi_inv - eye)))
