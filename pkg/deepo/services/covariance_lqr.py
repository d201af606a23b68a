"""
Covariance parameterization of the LQR: the data-driven cost J(V), its exact
gradient and Hessian quadratic form, offline projected gradient descent
(DeePO), the certainty-equivalence equivalence check and the gradient
dominance / smoothness constants.

For a covariance state with blocks U_bar, X0_bar, X1_bar and Phi,

    J(V) = Tr(P_V),  P_V = Q + V'U_bar'R U_bar V + V'X1_bar' P_V X1_bar V,

subject to X0_bar V = I_n, and the gain is recovered as K = U_bar V.
"""
import math
from typing import List, Optional, Tuple, Union

import numpy as np

from deepo.core.config import settings
from deepo.core.errors import (
    DegenerateError,
    InfeasibleError,
    NotStabilizableError,
    SpectralRadiusError,
    StepRejectedError,
)
from deepo.core.logging import logger
from deepo.schemas.data import CovarianceState, DataBatch
from deepo.schemas.policy import (
    CostBundle,
    DescentRecord,
    Eigenbasis,
    EquivalenceReport,
    PolicyV,
    TheoryConstants,
)
from deepo.schemas.system import GainK, LinearSystem
from deepo.services.numerics import (
    eigenbasis,
    nullspace_projector,
    right_pseudoinverse,
    sigma_min,
    solve_dare,
    solve_discrete_lyapunov,
)

PolicyLike = Union[PolicyV, np.ndarray]


def evaluate_policy(
    cov: CovarianceState, V: np.ndarray, *, cons_tol: Optional[float] = None
) -> PolicyV:
    """Wrap V with its feasibility status for the covariances ``cov``."""
    V = np.asarray(V, dtype=float)
    cons_tol = settings.cons_tol if cons_tol is None else cons_tol
    residual = float(np.max(np.abs(cov.X0_bar @ V - np.eye(cov.n))))
    basis = eigenbasis(cov.X1_bar @ V)
    feasible = residual <= cons_tol and basis.rho < 1.0 - settings.stability_margin
    return PolicyV(
        V=V,
        feasible=feasible,
        rho=basis.rho,
        constraint_residual=residual,
        closed_loop=basis,
    )


def _as_policy(cov: CovarianceState, V: PolicyLike) -> PolicyV:
    return V if isinstance(V, PolicyV) else evaluate_policy(cov, V)


def k_to_v(cov: CovarianceState, K: Union[GainK, np.ndarray]) -> PolicyV:
    """V = Phi^{-1} [K; I_n]."""
    matrix = K.K if isinstance(K, GainK) else np.asarray(K, dtype=float)
    stacked = np.vstack([matrix, np.eye(cov.n)])
    return evaluate_policy(cov, cov.Phi_inv @ stacked)


def v_to_k(cov: CovarianceState, V: PolicyLike) -> GainK:
    """K = U_bar V. Stability against a true plant is left to the caller."""
    matrix = V.V if isinstance(V, PolicyV) else np.asarray(V, dtype=float)
    return GainK(K=cov.U_bar @ matrix)


def _transposed(basis: Optional[Eigenbasis]) -> Optional[Eigenbasis]:
    return basis.transpose() if basis is not None else None


def _input_weight(cov: CovarianceState, R: np.ndarray) -> np.ndarray:
    return cov.U_bar.T @ R @ cov.U_bar


def _lyapunov_pair(
    cov: CovarianceState, policy: PolicyV, Q: np.ndarray, R: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    F = cov.X1_bar @ policy.V
    K = cov.U_bar @ policy.V
    basis = policy.closed_loop
    Sigma = solve_discrete_lyapunov(F, np.eye(cov.n), rho=policy.rho, basis=basis)
    P = solve_discrete_lyapunov(
        F.T, Q + K.T @ R @ K, rho=policy.rho, basis=_transposed(basis)
    )
    return P, Sigma


def cost(
    cov: CovarianceState, V: PolicyLike, Q: np.ndarray, R: np.ndarray
) -> CostBundle:
    """
    Data-driven cost J(V) = Tr(P_V).

    Returns:
        CostBundle: J with P_V and Sigma_V, or J = +inf for infeasible V
    """
    policy = _as_policy(cov, V)
    if not policy.feasible:
        return CostBundle(J=math.inf)
    try:
        P, Sigma = _lyapunov_pair(cov, policy, Q, R)
    except SpectralRadiusError:
        return CostBundle(J=math.inf)
    return CostBundle(J=float(np.trace(P)), P_V=P, Sigma_V=Sigma)


def objective(cov: CovarianceState, V: PolicyLike, Q: np.ndarray, R: np.ndarray) -> float:
    """J(V) alone, from the P_V solve; +inf for infeasible V."""
    policy = _as_policy(cov, V)
    if not policy.feasible:
        return math.inf
    F = cov.X1_bar @ policy.V
    K = cov.U_bar @ policy.V
    try:
        P = solve_discrete_lyapunov(
            F.T, Q + K.T @ R @ K, rho=policy.rho, basis=_transposed(policy.closed_loop)
        )
    except SpectralRadiusError:
        return math.inf
    return float(np.trace(P))


def _require_feasible(cov: CovarianceState, V: PolicyLike, what: str) -> PolicyV:
    policy = _as_policy(cov, V)
    if not policy.feasible:
        raise InfeasibleError(
            f"{what} needs a feasible policy (rho = {policy.rho:.4g}, "
            f"constraint residual = {policy.constraint_residual:.2e})"
        )
    return policy


def gradient(
    cov: CovarianceState,
    V: PolicyLike,
    Q: np.ndarray,
    R: np.ndarray,
    bundle: Optional[CostBundle] = None,
) -> np.ndarray:
    """
    Exact gradient 2 (U_bar'R U_bar + X1_bar'P_V X1_bar) V Sigma_V.

    Args:
        bundle: Precomputed cost of V, to avoid re-solving both Lyapunov
            equations

    Raises:
        InfeasibleError: If V is not feasible
    """
    policy = _require_feasible(cov, V, "gradient")
    bundle = bundle if bundle is not None else cost(cov, policy, Q, R)
    E = (_input_weight(cov, R) + cov.X1_bar.T @ bundle.P_V @ cov.X1_bar) @ policy.V
    return 2 * E @ bundle.Sigma_V


def hessian_quadratic_form(
    cov: CovarianceState,
    V: PolicyLike,
    Z: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    bundle: Optional[CostBundle] = None,
) -> float:
    """
    Second derivative of J along Z:

        4 Tr(Z'X1_bar' P'[Z] X1_bar V Sigma_V)
          + 2 Tr(Z'(U_bar'R U_bar + X1_bar'P_V X1_bar) Z Sigma_V),

    where P'[Z] solves P' = Z'E_V + E_V'Z + V'X1_bar' P' X1_bar V.
    """
    policy = _require_feasible(cov, V, "hessian_quadratic_form")
    Z = np.asarray(Z, dtype=float)
    bundle = bundle if bundle is not None else cost(cov, policy, Q, R)
    curvature = _input_weight(cov, R) + cov.X1_bar.T @ bundle.P_V @ cov.X1_bar
    E = curvature @ policy.V
    F = cov.X1_bar @ policy.V
    P_dot = solve_discrete_lyapunov(
        F.T, Z.T @ E + E.T @ Z, rho=policy.rho, basis=_transposed(policy.closed_loop)
    )
    first = 4 * np.trace(Z.T @ cov.X1_bar.T @ P_dot @ F @ bundle.Sigma_V)
    second = 2 * np.trace(Z.T @ curvature @ Z @ bundle.Sigma_V)
    return float(first + second)


def offline_deepo(
    cov: CovarianceState,
    V0: PolicyLike,
    eta: float,
    max_iters: int,
    grad_tol: float,
    Q: np.ndarray,
    R: np.ndarray,
    *,
    records: Optional[List[DescentRecord]] = None,
) -> Tuple[PolicyV, List[float]]:
    """
    Projected gradient descent V <- V - eta Pi_{X0_bar} grad J(V).

    Each accepted iterate has J no larger than its predecessor, so the whole
    sequence stays in the sublevel set of V0. A step that breaks this (or
    leaves the feasible set) is retried with half the stepsize; the nominal
    stepsize comes back after ``settings.restore_after`` clean steps.

    Args:
        cov: Sample covariances of the offline data
        V0: Feasible initial policy
        eta: Nominal stepsize
        max_iters: Iteration budget
        grad_tol: Stop once ||Pi grad J||_F <= grad_tol
        Q, R: LQR weights
        records: Optional list that receives one DescentRecord per iterate

    Returns:
        Tuple[PolicyV, List[float]]: Final policy and the non-increasing
            sequence of costs (first entry is J(V0))

    Raises:
        InfeasibleError: If V0 is not feasible
        StepRejectedError: If backtracking drives eta below settings.min_step
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    policy = _require_feasible(cov, V0, "offline_deepo")
    Pi = nullspace_projector(cov.X0_bar)

    bundle = cost(cov, policy, Q, R)
    trace = [bundle.J]
    step = eta
    clean_steps = 0

    for k in range(max_iters + 1):
        G = Pi @ gradient(cov, policy, Q, R, bundle)
        grad_norm = float(np.linalg.norm(G))
        if records is not None:
            records.append(
                DescentRecord(
                    iter=k,
                    J=bundle.J,
                    proj_grad_norm=grad_norm,
                    rho_X1V=policy.rho,
                    eta_used=step,
                )
            )
        if grad_norm <= grad_tol or k == max_iters:
            break

        while True:
            candidate = evaluate_policy(cov, policy.V - step * G)
            candidate_bundle = cost(cov, candidate, Q, R)
            if candidate_bundle.feasible and candidate_bundle.J <= bundle.J:
                break
            step /= 2
            clean_steps = 0
            logger.debug(f"Backtracking at iteration {k}: eta -> {step:.3e}")
            if step < settings.min_step:
                raise StepRejectedError(
                    f"stepsize fell below {settings.min_step:.0e} at iteration {k}",
                    iteration=k,
                    J=bundle.J,
                )

        policy, bundle = candidate, candidate_bundle
        trace.append(bundle.J)
        clean_steps += 1
        if step < eta and clean_steps >= settings.restore_after:
            step = eta
            clean_steps = 0

    logger.info(
        f"Offline DeePO finished after {len(trace) - 1} steps: J = {trace[-1]:.10g}"
    )
    return policy, trace


def estimate_system(batch: DataBatch) -> Tuple[np.ndarray, np.ndarray]:
    """Least-squares [B_hat, A_hat] = X1 D0^dagger; returns (A_hat, B_hat)."""
    Theta = batch.X1 @ right_pseudoinverse(batch.D0)
    m = batch.m
    return Theta[:, m:], Theta[:, :m]


def ce_gain(
    A_hat: np.ndarray, B_hat: np.ndarray, Q: np.ndarray, R: np.ndarray
) -> Tuple[np.ndarray, float]:
    """
    Certainty-equivalence gain and cost Tr(P_hat) for an identified model.

    Raises:
        InfeasibleError: If the identified model admits no stabilizing gain
    """
    try:
        P, K = solve_dare(A_hat, B_hat, Q, R)
    except NotStabilizableError as e:
        raise InfeasibleError(f"certainty-equivalence LQR is infeasible: {e}") from e
    return K, float(np.trace(P))


def equivalence_check(
    cov: CovarianceState,
    batch: DataBatch,
    Q: np.ndarray,
    R: np.ndarray,
    *,
    eta: float = 0.01,
    max_iters: int = 10000,
    grad_tol: float = 1e-10,
) -> EquivalenceReport:
    """
    Compare the optimum of the covariance-parameterized problem with the
    certainty-equivalence optimum of the least-squares model.

    Raises:
        InfeasibleError: If the CE gain is not stabilizing under X1_bar V
    """
    A_hat, B_hat = estimate_system(batch)
    K_ce, C_ce = ce_gain(A_hat, B_hat, Q, R)
    V0 = k_to_v(cov, K_ce)
    if not V0.feasible:
        raise InfeasibleError(
            f"CE gain is not feasible for the covariance problem (rho = {V0.rho:.4g})"
        )
    _, trace = offline_deepo(cov, V0, eta, max_iters, grad_tol, Q, R)
    J_star = trace[-1]
    return EquivalenceReport(J_star=J_star, C_ce_star=C_ce, gap=abs(J_star - C_ce))


def theory_constants(
    cov: CovarianceState, a: float, Q: np.ndarray, R: np.ndarray
) -> TheoryConstants:
    """
    Gradient dominance constant mu(a) and smoothness constant l(a) on the
    sublevel set {J <= a}:

        mu(a) = 4 a^2 / (s(Q)^{3/2} s(R)^{1/2} s(U_bar))
        l(a)  = 4 a^2 (xi + a - s(Q)) ||X1_bar||_F^2 / s(Q)^2 + 2 xi a / s(Q)
        xi    = ||U_bar||^2 ||R|| + ||X1_bar||^2 a

    with s(.) the smallest singular value.

    Raises:
        DegenerateError: If sigma_min(U_bar) is numerically zero
    """
    sq = float(np.min(np.linalg.eigvalsh(Q)))
    sr = float(np.min(np.linalg.eigvalsh(R)))
    if a < sq:
        raise ValueError(f"a = {a} must be at least sigma_min(Q) = {sq}")
    su = sigma_min(cov.U_bar)
    if su <= settings.rank_tol * float(np.linalg.norm(cov.U_bar, 2)):
        raise DegenerateError(f"sigma_min(U_bar) = {su:.3e} is numerically zero")
    mu = 4 * a**2 / (sq**1.5 * sr**0.5 * su)
    xi = np.linalg.norm(cov.U_bar, 2) ** 2 * np.linalg.norm(R, 2) + np.linalg.norm(
        cov.X1_bar, 2
    ) ** 2 * a
    smooth = 4 * a**2 * (xi + a - sq) * np.linalg.norm(cov.X1_bar, "fro") ** 2 / sq**2
    smooth += 2 * xi * a / sq
    return TheoryConstants(mu=float(mu), l=float(smooth))


def sublevel_bounds_hold(
    cov: CovarianceState, V: PolicyLike, bundle: CostBundle, Q: np.ndarray, R: np.ndarray
) -> bool:
    """
    Check ||Sigma_V|| <= J/s(Q), ||P_V|| <= J and ||U_bar V||_F <= sqrt(J/s(R)).
    """
    if not bundle.feasible:
        return False
    policy = _as_policy(cov, V)
    J = bundle.J
    slack = 1 + 1e-10
    sq = float(np.min(np.linalg.eigvalsh(Q)))
    sr = float(np.min(np.linalg.eigvalsh(R)))
    return bool(
        np.linalg.norm(bundle.Sigma_V, 2) <= slack * J / sq
        and np.linalg.norm(bundle.P_V, 2) <= slack * J
        and np.linalg.norm(cov.U_bar @ policy.V, "fro") <= slack * math.sqrt(J / sr)
    )


def true_closed_loop(system: LinearSystem, cov: CovarianceState, V: PolicyLike) -> np.ndarray:
    """A + B U_bar V, the closed loop the policy induces on the real plant."""
    policy = _as_policy(cov, V)
    return system.closed_loop(cov.U_bar @ policy.V)


__all__ = [
    "evaluate_policy",
    "k_to_v",
    "v_to_k",
    "cost",
    "objective",
    "gradient",
    "hessian_quadratic_form",
    "offline_deepo",
    "estimate_system",
    "ce_gain",
    "equivalence_check",
    "theory_constants",
    "sublevel_bounds_hold",
    "true_closed_loop",
]
