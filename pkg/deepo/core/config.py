from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    log_level: str = "INFO"
    output_dir: str = "results"
    max_workers: int = 1

    # Lyapunov / Riccati
    lyap_tol: float = 1e-11
    lyap_kron_max_dim: int = 8
    lyap_doubling_max_iters: int = 64
    stability_margin: float = 1e-9
    dare_tol: float = 1e-12
    dare_max_iters: int = 100000
    dare_divergence_bound: float = 1e14

    # Rank / feasibility
    rank_tol: float = 1e-10
    cons_tol: float = 1e-8

    # Data engine
    overflow_guard: float = 1e12
    phi_refresh_period: int = 1000
    phi_drift_tol: float = 1e-8
    sm_denominator_floor: float = 1e-12

    # Policy optimization
    min_step: float = 1e-12
    restore_after: int = 10
    descent_rtol: float = 1e-12
    recursive_policy_update: bool = True

    generation_attempts: int = 100
    diagnostics_file: Optional[str] = "diagnostics.json"

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="DEEPO_",
        case_sensitive=False,
    )


settings = Settings()
