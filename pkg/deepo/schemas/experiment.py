"""
Experiment configuration, in-run checks and summary records.
"""
from typing import List, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import ConfigDict, Field, model_validator

from deepo.schemas.base import DeepoBaseModel, Matrix
from deepo.schemas.baselines import ZoConfig
from deepo.schemas.data import NoiseModel

ExperimentName = Literal[
    "offline-convergence",
    "adaptive-regret",
    "compare-indirect",
    "finite-horizon-cost",
    "timing",
    "time-to-accuracy",
    "zo-sample-complexity",
    "tracking",
]

SystemKind = Literal["random", "reference", "laplacian"]


class StrictModel(DeepoBaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemSpec(StrictModel):
    """Which plant an experiment runs on."""
    kind: SystemKind = "random"
    n: int = Field(default=4, ge=1)
    m: int = Field(default=2, ge=1)
    state_weight: float = Field(default=1.0, gt=0.0, description="Q = state_weight * I")
    identity_input: bool = False
    rho_band: List[float] = Field(default_factory=lambda: [0.5, 0.95])

    @model_validator(mode="after")
    def validate_band(self) -> "SystemSpec":
        if len(self.rho_band) != 2 or not 0.0 < self.rho_band[0] <= self.rho_band[1] < 1.0:
            raise ValueError("rho_band must be [low, high] with 0 < low <= high < 1")
        return self


class ExperimentConfig(StrictModel):
    """
    A runnable experiment. Unknown keys are rejected, and every field is
    validated before anything runs.
    """
    experiment: ExperimentName
    system: SystemSpec = Field(default_factory=SystemSpec)
    noise: NoiseModel = Field(default_factory=NoiseModel.none)
    sigmas: Optional[List[float]] = Field(
        default=None, description="Noise-level sweep; replaces noise.sigma per entry"
    )
    eta: float = Field(default=0.01, ge=0.0)
    t0: int = Field(default=8, ge=1)
    T: int = Field(default=500, ge=1)
    forgetting: float = Field(default=1.0, gt=0.0, le=1.0)
    probe_scale: float = Field(default=1.0, ge=0.0, description="v_t ~ N(0, probe_scale^2 I)")
    initial_gain: Optional[Matrix] = None
    save_trajectory: bool = Field(
        default=False, description="Also write the offline trajectory of each closed-loop run"
    )

    # adaptive-regret
    noise_free_offline_sigma: float = Field(
        default=0.1,
        ge=0.0,
        description="Offline noise level of the sigma = 0 runs, so they start away from K*",
    )

    # compare-indirect, finite-horizon-cost, time-to-accuracy
    max_dropout: float = Field(
        default=0.1,
        ge=0.0,
        le=1.0,
        description="Largest share of seeds whose offline gain may fail to stabilize",
    )

    # offline-convergence
    batch_length: int = Field(default=8, ge=1)
    max_iters: int = Field(default=500, ge=0)
    grad_tol: float = Field(default=1e-12, ge=0.0)

    # zo-sample-complexity
    zo: ZoConfig = Field(default_factory=ZoConfig)
    targets: List[float] = Field(default_factory=lambda: [1.0, 0.1, 0.01])

    # timing, time-to-accuracy
    dims: List[int] = Field(default_factory=lambda: [10, 20, 30])
    trials: int = Field(default=50, ge=1)

    # tracking
    switch_at: int = Field(default=200, ge=1)
    switch_scale: float = Field(default=0.2, ge=0.0)
    compare_forgetting: float = Field(default=0.99, gt=0.0, le=1.0)

    seeds: List[int] = Field(default_factory=lambda: [0])
    output_dir: str = "results"

    @model_validator(mode="after")
    def validate_lists(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if self.sigmas is not None and any(s < 0 for s in self.sigmas):
            raise ValueError("sigmas must be non-negative")
        if any(d < 1 for d in self.dims):
            raise ValueError("dims must be positive")
        return self


class Check(DeepoBaseModel):
    """One in-run acceptance check and its verdict."""
    name: str
    passed: bool
    detail: str = ""


class ExperimentResult(DeepoBaseModel):
    experiment: str
    checks: List[Check] = Field(default_factory=list)
    artifacts: List[str] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)


SUMMARY_COLUMNS = ["index", "mean", "median", "q25", "q75", "iqr", "count"]


class SummaryRecord(DeepoBaseModel):
    """Per-index statistics over a set of traces."""
    label: str
    column: str
    index: List[float]
    mean: List[float]
    median: List[float]
    q25: List[float]
    q75: List[float]
    count: int
    slope: Optional[float] = Field(
        default=None, description="Fitted log-log slope of the mean over the whole index"
    )

    @property
    def iqr(self) -> np.ndarray:
        return np.asarray(self.q75) - np.asarray(self.q25)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "index": self.index,
                "mean": self.mean,
                "median": self.median,
                "q25": self.q25,
                "q75": self.q75,
                "iqr": self.iqr,
                "count": self.count,
            },
            columns=SUMMARY_COLUMNS,
        )
