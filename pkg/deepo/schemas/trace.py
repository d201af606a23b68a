"""
Per-step run records and the regret trace built from them.
"""
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import Field

from deepo.schemas.base import DeepoBaseModel

TRACE_COLUMNS = [
    "t",
    "cost_true",
    "J_t",
    "regret_avg",
    "snr_db",
    "sigma_min_D0",
    "rho_closed_loop",
    "stage_cost",
    "gain_step",
    "event_flags",
]


class StepRecord(DeepoBaseModel):
    t: int = Field(..., description="Time index of the gain K_t")
    cost_true: float = Field(..., description="C(K_t) under the true plant")
    J_t: float = Field(..., description="Data-driven cost of the running policy")
    regret_avg: float = Field(default=float("nan"), description="Average regret up to t")
    snr_db: float = Field(..., description="20 log10(sigma_min(D0) / ||W0||)")
    sigma_min_D0: float
    rho_closed_loop: float = Field(..., description="rho(A + B K_t) under the true plant")
    stage_cost: float = Field(..., description="||z_t||^2 = x'Qx + u'Ru at time t")
    gain_step: float = Field(..., description="||K_{t+1} - K_t||_F")
    event_flags: str = Field(default="", description="'|'-joined step events")


def average_regret(gaps: np.ndarray) -> np.ndarray:
    """Running mean of optimality gaps: entry T-1 is (1/T) sum of the first T gaps."""
    gaps = np.asarray(gaps, dtype=float)
    return np.cumsum(gaps) / np.arange(1, gaps.size + 1)


class RegretTrace(DeepoBaseModel):
    """
    Records of one closed-loop run plus the optimal cost they are measured
    against.
    """
    method: str = Field(default="deepo", description="Algorithm that produced the run")
    seed: Optional[int] = None
    Cstar: float = Field(..., description="Optimal cost C* of the true plant")
    records: List[StepRecord] = Field(default_factory=list)
    Cstar_schedule: Optional[List[float]] = Field(
        default=None,
        description="Per-record C* when the plant switches during the run",
    )

    def gaps(self) -> np.ndarray:
        costs = np.array([r.cost_true for r in self.records], dtype=float)
        if self.Cstar_schedule is not None:
            return costs - np.asarray(self.Cstar_schedule, dtype=float)
        return costs - self.Cstar

    def relative_gaps(self) -> np.ndarray:
        costs = np.array([r.cost_true for r in self.records], dtype=float)
        cstar = (
            np.asarray(self.Cstar_schedule, dtype=float)
            if self.Cstar_schedule is not None
            else self.Cstar
        )
        return (costs - cstar) / cstar

    def avg_regret(self) -> np.ndarray:
        return average_regret(self.gaps())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [r.model_dump() for r in self.records], columns=TRACE_COLUMNS
        )
