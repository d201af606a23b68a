"""
Ground-truth plants, true LQR cost evaluation, optimal gains and the system
generators used by the experiments.
"""
from importlib import resources
from typing import Tuple, Union

import numpy as np
from tenacity import (
    RetryError,
    retry,
    retry_if_exception_type,
    stop_after_attempt,
)

from deepo.core.config import settings
from deepo.core.errors import GenerationError, SpectralRadiusError
from deepo.core.logging import logger
from deepo.schemas.system import GainK, LinearSystem
from deepo.services.numerics import (
    solve_dare,
    solve_discrete_lyapunov,
    spectral_radius,
)
from deepo.utils.random import make_rng

UNSTABLE_COST = float("inf")

GainLike = Union[GainK, np.ndarray]


def _gain_matrix(K: GainLike) -> np.ndarray:
    return K.K if isinstance(K, GainK) else np.asarray(K, dtype=float)


def check_gain(system: LinearSystem, K: GainLike) -> GainK:
    """Tag a gain with its stability status under ``system``."""
    matrix = _gain_matrix(K)
    rho = spectral_radius(system.closed_loop(matrix))
    return GainK(K=matrix, stable=rho < 1.0 - settings.stability_margin, rho=rho)


def closed_loop_covariance(system: LinearSystem, K: GainLike) -> np.ndarray:
    """Sigma_K = I + (A+BK) Sigma_K (A+BK)^T."""
    Acl = system.closed_loop(_gain_matrix(K))
    return solve_discrete_lyapunov(Acl, np.eye(system.n))


def lqr_cost(system: LinearSystem, K: GainLike) -> float:
    """
    True LQR cost C(K) = Tr((Q + K'RK) Sigma_K).

    Returns:
        float: The cost, or ``UNSTABLE_COST`` (+inf) when A+BK is not stable
    """
    matrix = _gain_matrix(K)
    rho = spectral_radius(system.closed_loop(matrix))
    if rho >= 1.0 - settings.stability_margin:
        return UNSTABLE_COST
    try:
        Sigma = closed_loop_covariance(system, matrix)
    except SpectralRadiusError:
        return UNSTABLE_COST
    weight = system.Q + matrix.T @ system.R @ matrix
    return float(np.trace(weight @ Sigma))


def policy_gradient(system: LinearSystem, K: GainLike) -> np.ndarray:
    """
    Model-based gradient 2((R + B'P_K B)K + B'P_K A) Sigma_K of C(K).

    Used as an oracle; the data-driven methods never call it.
    """
    matrix = _gain_matrix(K)
    Acl = system.closed_loop(matrix)
    P = solve_discrete_lyapunov(Acl.T, system.Q + matrix.T @ system.R @ matrix)
    Sigma = solve_discrete_lyapunov(Acl, np.eye(system.n))
    B, A, R = system.B, system.A, system.R
    return 2 * ((R + B.T @ P @ B) @ matrix + B.T @ P @ A) @ Sigma


def optimal_gain(system: LinearSystem) -> Tuple[GainK, float]:
    """
    Optimal gain K* and optimal cost C* = Tr(P*) from the Riccati equation.
    """
    P, K = solve_dare(system.A, system.B, system.Q, system.R)
    gain = check_gain(system, K)
    return gain, float(np.trace(P))


def stage_cost(system: LinearSystem, x: np.ndarray, u: np.ndarray) -> float:
    """||z_t||^2 = x'Qx + u'Ru."""
    return float(x @ system.Q @ x + u @ system.R @ u)


def controllability_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def is_controllable(A: np.ndarray, B: np.ndarray) -> bool:
    return int(np.linalg.matrix_rank(controllability_matrix(A, B))) == A.shape[0]


class _Rejected(Exception):
    pass


def random_system(
    n: int,
    m: int,
    seed: int,
    *,
    rho_band: Tuple[float, float] = (0.5, 0.95),
    identity_input: bool = False,
) -> LinearSystem:
    """
    Random controllable, open-loop stable plant with Q = I_n and R = I_m.

    Entries of A and B are i.i.d. standard normal; A is rescaled so that
    rho(A) falls uniformly in ``rho_band``. Draws are rejected until the
    controllability matrix has full rank.

    Args:
        n: State dimension
        m: Input dimension
        seed: Seed of the generator; equal seeds give equal systems
        rho_band: Target band for the open-loop spectral radius
        identity_input: Use B = I_n (requires m == n), as in the timing study

    Raises:
        GenerationError: After ``settings.generation_attempts`` rejections
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be at least 1")
    if identity_input and m != n:
        raise ValueError("identity_input requires m == n")
    rng = make_rng(seed, "random-system", n, m)

    @retry(
        stop=stop_after_attempt(settings.generation_attempts),
        retry=retry_if_exception_type(_Rejected),
    )
    def draw() -> LinearSystem:
        A = rng.standard_normal((n, n))
        B = np.eye(n) if identity_input else rng.standard_normal((n, m))
        rho = spectral_radius(A)
        if rho == 0.0:
            raise _Rejected("nilpotent draw")
        A = A * (rng.uniform(*rho_band) / rho)
        if not is_controllable(A, B):
            raise _Rejected("uncontrollable draw")
        return LinearSystem(A=A, B=B, Q=np.eye(n), R=np.eye(m))

    try:
        return draw()
    except RetryError as e:
        raise GenerationError(
            f"no controllable system after {settings.generation_attempts} draws",
            n=n,
            m=m,
            seed=seed,
        ) from e


def load_fixture(name: str) -> np.ndarray:
    """Read a plain-text matrix block (rows by line, entries by whitespace)."""
    with resources.files("deepo.data").joinpath(f"{name}.txt").open() as handle:
        return np.loadtxt(handle, dtype=float, comments="#", ndmin=2)


def reference_system() -> LinearSystem:
    """The 4-state, 2-input open-loop stable plant with Q = I_4, R = I_2."""
    A = load_fixture("reference_A")
    B = load_fixture("reference_B")
    return LinearSystem(A=A, B=B, Q=np.eye(4), R=np.eye(2))


def benchmark_laplacian(state_weight: float = 1.0) -> LinearSystem:
    """
    Marginally unstable 3-state Laplacian benchmark with B = I_3,
    Q = state_weight * I_3 and R = I_3.
    """
    A = load_fixture("laplacian_A")
    logger.debug(f"Loaded Laplacian benchmark with rho(A) = {spectral_radius(A):.4f}")
    return LinearSystem(A=A, B=np.eye(3), Q=state_weight * np.eye(3), R=np.eye(3))


__all__ = [
    "UNSTABLE_COST",
    "lqr_cost",
    "optimal_gain",
    "policy_gradient",
    "check_gain",
    "closed_loop_covariance",
    "stage_cost",
    "controllability_matrix",
    "is_controllable",
    "random_system",
    "reference_system",
    "benchmark_laplacian",
    "load_fixture",
]
