"""
Comparison methods: indirect certainty-equivalence adaptive control
(recursive least squares plus a Riccati solve per step) and episodic
two-point zeroth-order policy optimization.
"""
from typing import List, Optional, Sequence, Tuple

import numpy as np

from deepo.core.config import settings
from deepo.core.errors import (
    ConvergenceError,
    DestabilizedError,
    DivergenceError,
    InfeasibleError,
    SingularUpdateError,
)
from deepo.core.logging import logger
from deepo.schemas.adaptive import AdaptiveConfig, PlantSwitch
from deepo.schemas.baselines import ComplexityRow, RlsState, ZoConfig
from deepo.schemas.data import DataBatch
from deepo.schemas.system import GainK, LinearSystem
from deepo.schemas.trace import RegretTrace, StepRecord
from deepo.services.adaptive import (
    closed_loop_sample,
    collect_offline_batch,
    evaluate_gain,
    finalize_trace,
    plant_at,
    run,
    sample_complexity,
    snr_db,
)
from deepo.services.covariance_lqr import ce_gain
from deepo.services.data_engine import NoiseSampler, build_covariances
from deepo.services.lqr_model import UNSTABLE_COST, check_gain, lqr_cost, optimal_gain, stage_cost
from deepo.services.numerics import symmetrize
from deepo.utils.random import make_rng


def rls_init(batch: DataBatch, forgetting: float = 1.0) -> RlsState:
    """
    Batch (forgetting-weighted) least squares Theta = X1 S D0' (D0 S D0')^{-1}.

    Raises:
        RankDeficientError: If D0 is not full row rank
    """
    cov = build_covariances(batch, forgetting)
    return RlsState(
        Theta_hat=cov.X1_bar @ cov.Phi_inv,
        PhiInv=cov.Phi_inv / cov.t,
        t=cov.t,
        forgetting=forgetting,
    )


def rls_update(
    state: RlsState, x_t: np.ndarray, u_t: np.ndarray, x_next: np.ndarray
) -> RlsState:
    """
    Add one regression sample psi = [u; x] -> x_next:

        k     = P psi / (beta + psi' P psi)
        Theta = Theta + (x_next - Theta psi) k'
        P     = (P - k psi' P) / beta

    Raises:
        SingularUpdateError: If beta + psi' P psi is not safely positive
    """
    psi = np.concatenate([np.asarray(u_t, dtype=float), np.asarray(x_t, dtype=float)])
    beta = state.forgetting
    P_psi = state.PhiInv @ psi
    denominator = beta + float(psi @ P_psi)
    if denominator <= settings.sm_denominator_floor:
        raise SingularUpdateError(
            f"RLS denominator {denominator:.3e} is not positive", denominator=denominator
        )
    gain = P_psi / denominator
    innovation = np.asarray(x_next, dtype=float) - state.Theta_hat @ psi
    return RlsState(
        Theta_hat=state.Theta_hat + np.outer(innovation, gain),
        PhiInv=symmetrize((state.PhiInv - np.outer(gain, P_psi)) / beta),
        t=state.t + 1,
        forgetting=beta,
    )


def rls_model(state: RlsState, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """Split Theta_hat into (A_hat, B_hat)."""
    return state.Theta_hat[:, m:], state.Theta_hat[:, :m]


def indirect_update(
    rls: RlsState,
    x: np.ndarray,
    u: np.ndarray,
    x_next: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    K: np.ndarray,
    ce_cost: float,
) -> Tuple[RlsState, np.ndarray, float, List[str]]:
    """
    One indirect update: RLS on (x_t, u_t, x_{t+1}), then the Riccati gain of
    the new estimate. The previous gain and cost are held ("hold") when the
    estimate admits no stabilizing solution.
    """
    rls = rls_update(rls, x, u, x_next)
    A_hat, B_hat = rls_model(rls, len(u))
    try:
        K_next, J_next = ce_gain(A_hat, B_hat, Q, R)
    except (InfeasibleError, ConvergenceError) as e:
        logger.warning(f"Holding gain at t={rls.t}: {e}")
        return rls, K, ce_cost, ["hold"]
    return rls, K_next, J_next, []


def indirect_adaptive_run(
    sys: LinearSystem,
    config: AdaptiveConfig,
    *,
    schedule: Sequence[PlantSwitch] = (),
) -> RegretTrace:
    """
    Certainty-equivalence adaptive control on the same data stream as the
    direct learner: per step, update (A_hat, B_hat) by RLS and re-solve the
    Riccati equation of the estimate. When the estimate admits no
    stabilizing solution the previous gain is held.

    The trace has the same columns as the direct learner's; ``J_t`` holds
    the certainty-equivalence cost Tr(P_hat) of the current estimate.
    """
    m = sys.m
    batch = collect_offline_batch(
        sys, config.t0, config.offline_input, config.batch_noise, config.seed
    )
    rls = rls_init(batch, config.forgetting)
    A_hat, B_hat = rls_model(rls, m)
    if config.initial_gain is None:
        K, ce_cost = ce_gain(A_hat, B_hat, sys.Q, sys.R)
    else:
        K, ce_cost = np.asarray(config.initial_gain, dtype=float), float("nan")

    x = batch.X1[:, -1]
    noise_gram = batch.W0 @ batch.W0.T
    records: List[StepRecord] = []
    cstar: List[float] = []
    optimal = {}

    for _ in range(config.T):
        t = rls.t
        plant = plant_at(sys, schedule, t)
        if id(plant) not in optimal:
            optimal[id(plant)] = optimal_gain(plant)[1]
        checked = evaluate_gain(plant, K, t)
        sigma = float(1.0 / np.sqrt(np.max(np.linalg.eigvalsh(rls.PhiInv))))
        noise_norm = float(np.sqrt(max(np.max(np.linalg.eigvalsh(noise_gram)), 0.0)))

        u, w, x_next = closed_loop_sample(
            plant, K, x, t, config.probe, config.noise, config.seed
        )
        rls, K_next, J_next, events = indirect_update(
            rls, x, u, x_next, plant.Q, plant.R, K, ce_cost
        )

        records.append(
            StepRecord(
                t=t,
                cost_true=lqr_cost(plant, checked),
                J_t=ce_cost,
                snr_db=snr_db(sigma, noise_norm),
                sigma_min_D0=sigma,
                rho_closed_loop=checked.rho,
                stage_cost=stage_cost(plant, x, u),
                gain_step=float(np.linalg.norm(K_next - K)),
                event_flags="|".join(events),
            )
        )
        cstar.append(optimal[id(plant)])
        noise_gram = noise_gram + np.outer(w, w)
        x, K, ce_cost = x_next, K_next, J_next

    trace = finalize_trace("indirect", config.seed, records, cstar)
    logger.info(f"Indirect run finished: final gap {trace.gaps()[-1]:.3e}")
    return trace


def sphere_directions(rng: np.random.Generator, count: int, m: int, n: int) -> np.ndarray:
    """``count`` m x n matrices uniform on the unit Frobenius sphere."""
    F = rng.standard_normal((count, m, n))
    return F / np.linalg.norm(F, axis=(1, 2), keepdims=True)


def two_point_gradient(
    costs_plus: np.ndarray, costs_minus: np.ndarray, F: np.ndarray, r: float
) -> np.ndarray:
    """Minibatch mean of (C(K + rF) - C(K - rF)) (mn / r) F."""
    _, m, n = F.shape
    differences = np.asarray(costs_plus) - np.asarray(costs_minus)
    return (m * n / r) * np.mean(differences[:, None, None] * F, axis=0)


def rollout_costs(
    sys: LinearSystem,
    gains: np.ndarray,
    horizon: int,
    sampler: NoiseSampler,
) -> np.ndarray:
    """
    Empirical costs (1/T) sum ||z_k||^2 of one noisy rollout per gain, all
    started at x0 = 0 and simulated side by side.

    Raises:
        DivergenceError: If a rollout exceeds settings.overflow_guard
    """
    count = gains.shape[0]
    X = np.zeros((count, sys.n))
    total = np.zeros(count)
    for _ in range(horizon):
        U = np.einsum("imn,in->im", gains, X)
        total += np.einsum("in,nk,ik->i", X, sys.Q, X) + np.einsum("im,mk,ik->i", U, sys.R, U)
        X = X @ sys.A.T + U @ sys.B.T + sampler.draw_batch(count, X)
        largest = np.max(np.linalg.norm(X, axis=1))
        if not np.all(np.isfinite(X)) or largest > settings.overflow_guard:
            raise DivergenceError("perturbed rollout diverged")
    return total / horizon


def zeroth_order_po_run(
    sys: LinearSystem,
    K0: GainK,
    zo: ZoConfig,
    opt_gap_targets: Sequence[float],
) -> List[ComplexityRow]:
    """
    Episodic two-point zeroth-order policy gradient

        K <- K - eta * mean_j (C_hat(K + r F_j) - C_hat(K - r F_j)) (mn / r) F_j,

    with 2 * minibatch fresh rollouts per iteration. Returns, for each
    relative-gap target, the number of rollouts consumed when the target was
    first met (None if the iteration budget ran out).

    Raises:
        DestabilizedError: If K0 does not stabilize ``sys``
        DivergenceError: If an iterate or a perturbed rollout destabilizes
    """
    K = K0.K.copy()
    if not check_gain(sys, K).stable:
        raise DestabilizedError("initial gain does not stabilize the plant")
    _, cstar = optimal_gain(sys)
    m, n = sys.m, sys.n
    rng = make_rng(zo.seed, "zeroth-order")
    sampler = NoiseSampler(zo.noise, n, make_rng(zo.seed, "zeroth-order-noise"))

    pending = sorted(opt_gap_targets, reverse=True)
    hits = {target: None for target in opt_gap_targets}
    trajectories = 0

    def record_hits(gap: float) -> None:
        while pending and gap <= pending[0]:
            hits[pending.pop(0)] = trajectories

    record_hits((lqr_cost(sys, K) - cstar) / cstar)
    for iteration in range(zo.max_iters):
        if not pending:
            break
        F = sphere_directions(rng, zo.minibatch, m, n)
        gains = np.concatenate([K + zo.r * F, K - zo.r * F])
        costs = rollout_costs(sys, gains, zo.T_rollout, sampler)
        trajectories += 2 * zo.minibatch
        K = K - zo.eta * two_point_gradient(costs[: zo.minibatch], costs[zo.minibatch:], F, zo.r)

        C = lqr_cost(sys, K)
        if C == UNSTABLE_COST:
            raise DivergenceError(
                f"zeroth-order iterate destabilized the plant at iteration {iteration}",
                iteration=iteration,
            )
        record_hits((C - cstar) / cstar)
        if iteration % 500 == 0:
            logger.debug(f"ZO iteration {iteration}: gap {(C - cstar) / cstar:.3e}")

    logger.info(f"Zeroth-order run used {trajectories} trajectories: {hits}")
    return [
        ComplexityRow(target_eps=target, trajectories=hits[target], seed=zo.seed)
        for target in opt_gap_targets
    ]


def deepo_sample_complexity(
    sys: LinearSystem,
    config: AdaptiveConfig,
    opt_gap_targets: Sequence[float],
) -> List[ComplexityRow]:
    """Input-state pairs the direct learner needs to reach each relative gap."""
    trace = run(sys, config)
    hits = sample_complexity(trace, opt_gap_targets)
    return [
        ComplexityRow(target_eps=target, pairs=hits[target], seed=config.seed)
        for target in opt_gap_targets
    ]


def merge_complexity(
    zo_rows: Sequence[ComplexityRow], deepo_rows: Sequence[ComplexityRow]
) -> List[ComplexityRow]:
    """Join zeroth-order and DeePO rows on (target, seed)."""
    pairs = {(row.target_eps, row.seed): row.pairs for row in deepo_rows}
    return [
        row.model_copy(update={"pairs": pairs.get((row.target_eps, row.seed))})
        for row in zo_rows
    ]


def mean_gain_variation(trace: RegretTrace, after: int) -> float:
    """Mean ||K_{t+1} - K_t||_F over records with t >= ``after``."""
    steps = [r.gain_step for r in trace.records if r.t >= after]
    return float(np.mean(steps)) if steps else float("nan")


def first_hit(trace: RegretTrace, target: float) -> Optional[int]:
    return sample_complexity(trace, [target])[target]


__all__ = [
    "rls_init",
    "rls_update",
    "rls_model",
    "indirect_update",
    "indirect_adaptive_run",
    "sphere_directions",
    "two_point_gradient",
    "rollout_costs",
    "zeroth_order_po_run",
    "deepo_sample_complexity",
    "merge_complexity",
    "mean_gain_variation",
    "first_hit",
]
