"""
Closed-loop simulation, sample covariances with exact rank-one maintenance,
persistency-of-excitation levels and SNR diagnostics.
"""
from typing import Callable, Dict, Optional

import numpy as np
import scipy.linalg

from deepo.core.config import settings
from deepo.core.errors import (
    DivergenceError,
    InsufficientDataError,
    MissingNoiseError,
    RankDeficientError,
    SingularUpdateError,
)
from deepo.core.logging import logger
from deepo.schemas.data import CovarianceState, DataBatch, NoiseModel
from deepo.schemas.system import LinearSystem
from deepo.services.numerics import sigma_min, symmetrize
from deepo.utils.random import make_rng

InputPolicy = Callable[[int, np.ndarray], np.ndarray]


class NoiseSampler:
    """
    Stateful draw stream for a ``NoiseModel``.

    Calling the sampler returns the next n-vector; adversarial strategies
    may look at the current state ``x``.
    """

    def __init__(
        self,
        model: NoiseModel,
        dim: int,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        self.model = model
        self.dim = dim
        self.rng = rng if rng is not None else np.random.default_rng(model.seed)
        self._direction: Optional[np.ndarray] = None

    def __call__(self, x: Optional[np.ndarray] = None) -> np.ndarray:
        model = self.model
        if model.kind == "none":
            return np.zeros(self.dim)
        if model.kind == "uniform":
            return self.rng.uniform(0.0, model.sigma, self.dim)
        if model.kind == "gaussian":
            return model.sigma * self.rng.standard_normal(self.dim)
        return self._adversarial(x)

    def _adversarial(self, x: Optional[np.ndarray]) -> np.ndarray:
        delta = self.model.delta
        strategy = self.model.strategy
        if strategy == "aligned" and x is not None and np.linalg.norm(x) > 0:
            return delta * x / np.linalg.norm(x)
        if strategy == "constant" or strategy == "aligned":
            if self._direction is None:
                self._direction = np.eye(self.dim)[0]
            return delta * self._direction
        direction = self.rng.standard_normal(self.dim)
        return delta * direction / np.linalg.norm(direction)

    def draw_batch(self, count: int, X: Optional[np.ndarray] = None) -> np.ndarray:
        """``count`` independent draws as rows; ``X`` holds the matching states."""
        model = self.model
        if model.kind == "none":
            return np.zeros((count, self.dim))
        if model.kind == "uniform":
            return self.rng.uniform(0.0, model.sigma, (count, self.dim))
        if model.kind == "gaussian":
            return model.sigma * self.rng.standard_normal((count, self.dim))
        rows = [self._adversarial(None if X is None else X[i]) for i in range(count)]
        return np.array(rows)


def make_sampler(
    model: NoiseModel, dim: int, rng: Optional[np.random.Generator] = None
) -> NoiseSampler:
    return NoiseSampler(model, dim, rng)


def draw_noise(
    model: NoiseModel,
    dim: int,
    seed: int,
    stream: str,
    t: int,
    x: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Single draw keyed by (seed, stream, t), so that runs sharing a seed see
    the same realization at every time index regardless of the method.
    """
    return NoiseSampler(model, dim, make_rng(seed, stream, t))(x)


def simulate(
    system: LinearSystem,
    input_policy: InputPolicy,
    noise: NoiseModel | NoiseSampler,
    horizon: int,
    x0: Optional[np.ndarray] = None,
) -> DataBatch:
    """
    Roll x_{t+1} = A x_t + B u_t + w_t forward for ``horizon`` steps.

    Args:
        system: Plant to simulate
        input_policy: Callable (t, x_t) -> u_t
        noise: Noise model (seeded by its own seed) or an existing sampler
        horizon: Number of transitions t
        x0: Initial state, zero when omitted

    Returns:
        DataBatch: Recorded X0, U0, X1 and W0

    Raises:
        DivergenceError: If a state norm exceeds settings.overflow_guard
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    n, m = system.n, system.m
    sampler = noise if isinstance(noise, NoiseSampler) else make_sampler(noise, n)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).reshape(n)

    X = np.zeros((n, horizon + 1))
    U = np.zeros((m, horizon))
    W = np.zeros((n, horizon))
    X[:, 0] = x
    for t in range(horizon):
        u = np.asarray(input_policy(t, x), dtype=float).reshape(m)
        w = sampler(x)
        x = system.A @ x + system.B @ u + w
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > settings.overflow_guard:
            raise DivergenceError(
                f"state norm exceeded {settings.overflow_guard:.0e} at t={t + 1}",
                t=t + 1,
            )
        U[:, t] = u
        W[:, t] = w
        X[:, t + 1] = x
    return DataBatch(X0=X[:, :-1], U0=U, X1=X[:, 1:], W0=W)


def gaussian_input(
    m: int, rng: np.random.Generator, scale: float = 1.0
) -> InputPolicy:
    """Open-loop excitation u_t ~ N(0, scale^2 I_m)."""
    return lambda t, x: scale * rng.standard_normal(m)


def random_batch(
    system: LinearSystem,
    horizon: int,
    rng: np.random.Generator,
    noise_scale: float = 1.0,
) -> DataBatch:
    """
    Independent columns: X0, U0 and W0 standard normal (W0 scaled by
    ``noise_scale``), X1 = A X0 + B U0 + W0. The columns need not come from
    one trajectory.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    X0 = rng.standard_normal((system.n, horizon))
    U0 = rng.standard_normal((system.m, horizon))
    W0 = noise_scale * rng.standard_normal((system.n, horizon))
    return DataBatch(X0=X0, U0=U0, X1=system.A @ X0 + system.B @ U0 + W0, W0=W0)


def _weights(t: int, forgetting: float) -> np.ndarray:
    # diag(beta^{t-1}, ..., beta, 1)
    return forgetting ** np.arange(t - 1, -1, -1, dtype=float)


def build_covariances(batch: DataBatch, forgetting: float = 1.0) -> CovarianceState:
    """
    Sample covariances Phi = D0 S D0^T / t, U_bar = U0 S D0^T / t,
    X0_bar = X0 S D0^T / t and X1_bar = X1 S D0^T / t, with S the diagonal
    forgetting weights (S = I when forgetting = 1).

    Raises:
        RankDeficientError: If D0 does not have full row rank
    """
    if not 0.0 < forgetting <= 1.0:
        raise ValueError("forgetting must lie in (0, 1]")
    D0 = batch.D0
    t = batch.t
    p = D0.shape[0]
    s_min = sigma_min(D0)
    s_max = float(np.linalg.norm(D0, 2))
    if t < p or s_min <= settings.rank_tol * s_max:
        raise RankDeficientError(
            f"D0 ({p}x{t}) is not full row rank: sigma_min = {s_min:.3e}",
            sigma_min=s_min,
        )
    weighted = D0.T * _weights(t, forgetting)[:, None]
    Phi = symmetrize(D0 @ weighted / t)
    Phi_inv = symmetrize(scipy.linalg.solve(Phi, np.eye(p), assume_a="pos"))
    return CovarianceState(
        U_bar=batch.U0 @ weighted / t,
        X0_bar=batch.X0 @ weighted / t,
        X1_bar=batch.X1 @ weighted / t,
        Phi=Phi,
        Phi_inv=Phi_inv,
        t=t,
        forgetting=forgetting,
    )


def refresh_inverse(state: CovarianceState) -> CovarianceState:
    p = state.Phi.shape[0]
    Phi_inv = symmetrize(scipy.linalg.solve(state.Phi, np.eye(p), assume_a="pos"))
    return state.model_copy(update={"Phi_inv": Phi_inv, "updates_since_refresh": 0})


def sherman_morrison_terms(
    state: CovarianceState, psi: np.ndarray
) -> tuple[np.ndarray, float]:
    """
    Return (Phi^{-1} psi, beta t + psi' Phi^{-1} psi), the two quantities
    shared by the inverse update and the recursive policy update.

    Raises:
        SingularUpdateError: If the denominator is not safely positive
    """
    Phi_inv_psi = state.Phi_inv @ psi
    denominator = state.forgetting * state.t + float(psi @ Phi_inv_psi)
    if denominator <= settings.sm_denominator_floor:
        raise SingularUpdateError(
            f"Sherman-Morrison denominator {denominator:.3e} is not positive",
            denominator=denominator,
        )
    return Phi_inv_psi, denominator


def rank_one_update(
    state: CovarianceState,
    x_t: np.ndarray,
    u_t: np.ndarray,
    x_next: np.ndarray,
) -> CovarianceState:
    """
    Add the sample (x_t, u_t, x_{t+1}) to the covariances.

    With psi = [u; x] and beta the forgetting factor,

        Phi_{t+1} = (beta t Phi_t + psi psi') / (t + 1)

    and the inverse follows from the Sherman-Morrison formula

        Phi_{t+1}^{-1} = (t+1)/(beta t) (Phi^{-1} - Phi^{-1} psi psi' Phi^{-1}
                                          / (beta t + psi' Phi^{-1} psi)).

    The inverse is recomputed directly every ``phi_refresh_period`` updates
    or when ||Phi Phi^{-1} - I||_max drifts above ``phi_drift_tol``.
    """
    x_t = np.asarray(x_t, dtype=float).reshape(-1)
    u_t = np.asarray(u_t, dtype=float).reshape(-1)
    x_next = np.asarray(x_next, dtype=float).reshape(-1)
    psi = np.concatenate([u_t, x_t])

    t = state.t
    beta = state.forgetting
    Phi_inv_psi, denominator = sherman_morrison_terms(state, psi)
    decay = beta * t / (t + 1)
    inv_scale = (t + 1) / (beta * t)

    Phi = symmetrize(decay * state.Phi + np.outer(psi, psi) / (t + 1))
    Phi_inv = inv_scale * (
        state.Phi_inv - np.outer(Phi_inv_psi, Phi_inv_psi) / denominator
    )
    updated = CovarianceState(
        U_bar=decay * state.U_bar + np.outer(u_t, psi) / (t + 1),
        X0_bar=decay * state.X0_bar + np.outer(x_t, psi) / (t + 1),
        X1_bar=decay * state.X1_bar + np.outer(x_next, psi) / (t + 1),
        Phi=Phi,
        Phi_inv=symmetrize(Phi_inv),
        t=t + 1,
        forgetting=beta,
        updates_since_refresh=state.updates_since_refresh + 1,
    )

    if updated.updates_since_refresh >= settings.phi_refresh_period:
        return refresh_inverse(updated)
    drift = updated.inverse_drift()
    if drift > settings.phi_drift_tol:
        logger.warning(f"Refreshing Phi inverse at t={t + 1} (drift {drift:.2e})")
        return refresh_inverse(updated)
    return updated


def hankel_matrix(U0: np.ndarray, order: int) -> np.ndarray:
    """
    Block Hankel matrix with ``order`` block rows; column j stacks
    u_j, ..., u_{j+order-1}.
    """
    m, t = U0.shape
    columns = t - order + 1
    H = np.zeros((order * m, columns))
    for j in range(columns):
        H[:, j] = U0[:, j:j + order].T.reshape(-1)
    return H


def pe_level(U0: np.ndarray, order: int) -> float:
    """
    Normalized excitation level sigma_min(H_order(U0)) / sqrt(t * order).

    Raises:
        InsufficientDataError: If t < order + 1
    """
    U0 = np.atleast_2d(np.asarray(U0, dtype=float))
    t = U0.shape[1]
    if order < 1:
        raise ValueError("order must be at least 1")
    if t < order + 1:
        raise InsufficientDataError(
            f"need at least {order + 1} samples for order {order}, got {t}"
        )
    H = hankel_matrix(U0, order)
    if H.shape[0] > H.shape[1]:
        return 0.0
    return sigma_min(H) / np.sqrt(t * order)


def snr_diagnostics(batch: DataBatch) -> Dict[str, float]:
    """
    SNR proxy sigma_min(D0) / ||W0|| in dB (20 log10, amplitude ratio).

    Raises:
        MissingNoiseError: If the batch carries no W0
    """
    if batch.W0 is None:
        raise MissingNoiseError("snr_diagnostics needs the recorded noise W0")
    s_min = sigma_min(batch.D0)
    noise_norm = float(np.linalg.norm(batch.W0, 2))
    if noise_norm == 0.0:
        snr_db = float("inf")
    elif s_min == 0.0:
        snr_db = float("-inf")
    else:
        snr_db = 20.0 * np.log10(s_min / noise_norm)
    return {"sigma_min_D0": s_min, "noise_norm": noise_norm, "snr_db": float(snr_db)}


__all__ = [
    "NoiseSampler",
    "make_sampler",
    "draw_noise",
    "simulate",
    "gaussian_input",
    "random_batch",
    "build_covariances",
    "rank_one_update",
    "refresh_inverse",
    "sherman_morrison_terms",
    "hankel_matrix",
    "pe_level",
    "snr_diagnostics",
]
