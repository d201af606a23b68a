"""
Direct adaptive learning of the LQR: one projected gradient step of the
covariance-parameterized cost per closed-loop sample.

The learner only ever sees (x_t, u_t, x_{t+1}): ``sample`` runs the true plant
to produce a transition, ``update`` learns from it, and ``run`` evaluates
C(K_t) against the plant. The plant never enters ``update``.
"""
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from deepo.core.config import settings
from deepo.core.errors import (
    DestabilizedError,
    DivergenceError,
    InfeasibleError,
    RankDeficientError,
)
from deepo.core.logging import logger
from deepo.schemas.adaptive import AdaptiveConfig, AdaptiveState, PlantSwitch
from deepo.schemas.data import CovarianceState, DataBatch, NoiseModel
from deepo.schemas.policy import PolicyV
from deepo.schemas.system import GainK, LinearSystem
from deepo.schemas.trace import RegretTrace, StepRecord, average_regret
from deepo.services.covariance_lqr import (
    ce_gain,
    cost,
    estimate_system,
    evaluate_policy,
    gradient,
    hessian_quadratic_form,
    k_to_v,
    objective,
    v_to_k,
)
from deepo.services.data_engine import (
    NoiseSampler,
    build_covariances,
    draw_noise,
    rank_one_update,
    sherman_morrison_terms,
    simulate,
)
from deepo.services.lqr_model import check_gain, lqr_cost, optimal_gain, stage_cost
from deepo.services.numerics import project_nullspace
from deepo.utils.random import make_rng

PROBE_STREAM = "probe"
NOISE_STREAM = "noise"


def snr_db(sigma_min_D0: float, noise_norm: float) -> float:
    if noise_norm == 0.0:
        return float("inf")
    if sigma_min_D0 == 0.0:
        return float("-inf")
    return float(20.0 * np.log10(sigma_min_D0 / noise_norm))


def collect_offline_batch(
    system: LinearSystem,
    t0: int,
    offline_input: NoiseModel,
    noise: NoiseModel,
    seed: int,
) -> DataBatch:
    """
    Open-loop batch of ``t0`` samples from x0 = 0. Every method started with
    the same seed sees the same batch.

    Raises:
        RankDeficientError: If t0 < m + n
    """
    n, m = system.n, system.m
    if t0 < m + n:
        raise RankDeficientError(
            f"t0 = {t0} samples cannot excite m + n = {m + n} directions",
            sigma_min=0.0,
        )
    excitation = NoiseSampler(offline_input, m, make_rng(seed, "offline"))
    disturbance = NoiseSampler(noise, n, make_rng(seed, "offline-noise"))
    return simulate(system, lambda t, x: excitation(), disturbance, t0)


def initialize(
    sys_for_sim: LinearSystem,
    t0: int,
    offline_input: NoiseModel,
    noise: NoiseModel,
    seed: int,
    *,
    eta: float = 0.01,
    probe: Optional[NoiseModel] = None,
    forgetting: float = 1.0,
    initial_gain: Optional[np.ndarray] = None,
) -> AdaptiveState:
    """
    Collect the offline batch, build its covariances and pick K_{t0}.

    K_{t0} is the certainty-equivalence gain of the least-squares model
    unless ``initial_gain`` is given; it is then re-expressed as
    V = Phi^{-1}[K; I] so that K_{t0} = U_bar V.

    Raises:
        RankDeficientError: If the offline batch is not persistently exciting
        InfeasibleError: If no stabilizing gain can be found from the batch
    """
    batch = collect_offline_batch(sys_for_sim, t0, offline_input, noise, seed)
    cov = build_covariances(batch, forgetting)

    if initial_gain is None:
        A_hat, B_hat = estimate_system(batch)
        K0, _ = ce_gain(A_hat, B_hat, sys_for_sim.Q, sys_for_sim.R)
    else:
        K0 = np.asarray(initial_gain, dtype=float)

    V = k_to_v(cov, K0)
    if not V.feasible:
        raise InfeasibleError(
            f"initial gain is not feasible for the offline data (rho = {V.rho:.4g})",
            rho=V.rho,
        )
    logger.info(f"Initialized adaptive learner at t0={t0} (rho(X1_bar V) = {V.rho:.4f})")
    return AdaptiveState(
        cov=cov,
        K_t=v_to_k(cov, V),
        V_t_prime=V,
        t=t0,
        eta=eta,
        probe=probe if probe is not None else NoiseModel.gaussian(1.0),
        forgetting=forgetting,
        seed=seed,
        x=batch.X1[:, -1],
        noise_gram=batch.W0 @ batch.W0.T,
    )


def recursive_policy_update(
    cov: CovarianceState, V_prime: np.ndarray, psi: np.ndarray
) -> np.ndarray:
    """
    V_{t+1} = Phi_{t+1}^{-1} [K_t; I] from the pre-update covariances, using
    Phi_t V'_t = [K_t; I]:

        V_{t+1} = (t+1)/(beta t) (V' - Phi^{-1} psi psi' V' / (beta t + psi' Phi^{-1} psi)).
    """
    Phi_inv_psi, denominator = sherman_morrison_terms(cov, psi)
    scale = (cov.t + 1) / (cov.forgetting * cov.t)
    return scale * (V_prime - np.outer(Phi_inv_psi, psi @ V_prime) / denominator)


def _next_state(
    system: LinearSystem, x: np.ndarray, u: np.ndarray, w: np.ndarray, t: int
) -> np.ndarray:
    x_next = system.A @ x + system.B @ u + w
    if not np.all(np.isfinite(x_next)) or np.linalg.norm(x_next) > settings.overflow_guard:
        raise DivergenceError(
            f"state norm exceeded {settings.overflow_guard:.0e} at t={t + 1}", t=t + 1
        )
    return x_next


def closed_loop_sample(
    sys: LinearSystem,
    K: np.ndarray,
    x: np.ndarray,
    t: int,
    excitation: NoiseModel,
    noise: NoiseModel,
    seed: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    u_t = K x_t + v_t and x_{t+1} = A x_t + B u_t + w_t, with v_t and w_t
    keyed by (seed, t) so that every method sharing a seed sees the same draws.

    Returns:
        Tuple[np.ndarray, np.ndarray, np.ndarray]: (u_t, w_t, x_{t+1})

    Raises:
        DivergenceError: If the state norm exceeds settings.overflow_guard
    """
    n, m = K.shape[1], K.shape[0]
    v = draw_noise(excitation, m, seed, PROBE_STREAM, t)
    u = K @ x + v
    w = draw_noise(noise, n, seed, NOISE_STREAM, t, x)
    return u, w, _next_state(sys, x, u, w, t)


def sample(
    state: AdaptiveState, sys: LinearSystem, noise: NoiseModel
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One closed-loop transition under K_t; returns (x_t, u_t, w_t, x_{t+1})."""
    u, w, x_next = closed_loop_sample(
        sys, state.K_t.K, state.x, state.t, state.probe, noise, state.seed
    )
    return state.x, u, w, x_next


def projected_step(
    cov: CovarianceState,
    policy: PolicyV,
    Q: np.ndarray,
    R: np.ndarray,
    eta: float,
) -> Tuple[PolicyV, List[str]]:
    """
    One projected gradient step V - s Pi grad J(V) on the current covariances.

    The stepsize s starts at min(eta, 1/kappa), with kappa the curvature of J
    along the projected gradient, and is halved until the candidate is
    feasible and J(candidate) <= J(V) (1 + settings.descent_rtol). Below
    settings.min_step the step is abandoned and V is kept. The next call starts
    from eta again.

    Returns:
        Tuple[PolicyV, List[str]]: New policy and the events of this step
            ("backtrack" and/or "hold")

    Raises:
        InfeasibleError: If ``policy`` is not feasible
    """
    bundle = cost(cov, policy, Q, R)
    G = project_nullspace(cov.X0_bar, gradient(cov, policy, Q, R, bundle))
    grad_sq = float(np.sum(G * G))
    if grad_sq == 0.0:
        return policy, []

    curvature = hessian_quadratic_form(cov, policy, G, Q, R, bundle) / grad_sq
    step_size = min(eta, 1.0 / curvature) if curvature > 0 else eta
    limit = bundle.J * (1.0 + settings.descent_rtol)
    events: List[str] = []
    while step_size >= settings.min_step:
        candidate = evaluate_policy(cov, policy.V - step_size * G)
        if objective(cov, candidate, Q, R) <= limit:
            return candidate, events
        if not events:
            events.append("backtrack")
        step_size /= 2
    events.append("hold")
    return policy, events


def update(
    state: AdaptiveState,
    sys: LinearSystem,
    x: np.ndarray,
    u: np.ndarray,
    x_next: np.ndarray,
    w: Optional[np.ndarray] = None,
) -> AdaptiveState:
    """
    Learn from one transition (x_t, u_t, x_{t+1}).

    Updates the covariances by a rank-one correction, maps K_t to
    V_{t+1} = Phi_{t+1}^{-1}[K_t; I] and takes one projected gradient step
    V'_{t+1} = V_{t+1} - eta Pi grad J_{t+1}(V_{t+1}), K_{t+1} = U_bar V'_{t+1}.
    ``sys`` supplies the weights Q, R and the stage cost; ``w``, when given,
    feeds the noise diagnostics only.

    When V_{t+1} is not feasible the gradient step is skipped ("skip"). The
    step itself is safeguarded by ``projected_step``.

    Raises:
        SingularUpdateError: If the rank-one update degenerates
    """
    n = state.cov.n
    t = state.t
    K = state.K_t.K

    cov = rank_one_update(state.cov, x, u, x_next)
    if settings.recursive_policy_update:
        psi = np.concatenate([u, x])
        V_next = recursive_policy_update(state.cov, state.V_t_prime.V, psi)
    else:
        V_next = cov.Phi_inv @ np.vstack([K, np.eye(n)])
    policy = evaluate_policy(cov, V_next)

    events: List[str] = []
    if not policy.feasible:
        events.append("skip")
        logger.warning(
            f"Skipping gradient step at t={t + 1}: rho(X1_bar V) = {policy.rho:.4f}, "
            f"residual {policy.constraint_residual:.2e}"
        )
        updated = policy
    elif state.eta == 0.0:
        updated = policy
    else:
        updated, events = projected_step(cov, policy, sys.Q, sys.R, state.eta)
        if "hold" in events:
            logger.warning(f"No descent step found at t={t + 1}; keeping V_(t+1)")

    K_next = v_to_k(cov, updated)
    noise_gram = state.noise_gram if w is None else state.noise_gram + np.outer(w, w)
    return state.model_copy(
        update={
            "cov": cov,
            "K_t": K_next,
            "V_t_prime": updated,
            "t": t + 1,
            "x": x_next,
            "noise_gram": noise_gram,
            "stage_cost": stage_cost(sys, x, u),
            "gain_step": float(np.linalg.norm(K_next.K - K)),
            "events": events,
        }
    )


def step(
    state: AdaptiveState,
    sys: LinearSystem,
    noise: NoiseModel,
) -> AdaptiveState:
    """
    One sample of the closed loop followed by one projected gradient step.

    Raises:
        DivergenceError: If the state norm exceeds settings.overflow_guard
        SingularUpdateError: If the rank-one update degenerates
    """
    x, u, w, x_next = sample(state, sys, noise)
    return update(state, sys, x, u, x_next, w)


def plant_at(system: LinearSystem, schedule: Sequence[PlantSwitch], t: int) -> LinearSystem:
    """The plant active at time ``t`` under a switching schedule."""
    active = system
    for switch in sorted(schedule, key=lambda s: s.at):
        if t >= switch.at:
            active = switch.system
    return active


def evaluate_gain(system: LinearSystem, K: GainK, t: int) -> GainK:
    """
    Tag K with its stability status under the true plant.

    Raises:
        DestabilizedError: If K does not stabilize the plant
    """
    checked = check_gain(system, K)
    if not checked.stable:
        raise DestabilizedError(
            f"gain at t={t} does not stabilize the true plant (rho = {checked.rho:.6g})",
            t=t,
            rho=checked.rho,
            K=checked.K.tolist(),
        )
    return checked


def finalize_trace(
    method: str,
    seed: int,
    records: List[StepRecord],
    cstar: List[float],
) -> RegretTrace:
    """Attach the running average regret to the records."""
    gaps = np.array([r.cost_true for r in records]) - np.asarray(cstar, dtype=float)
    records = [
        record.model_copy(update={"regret_avg": float(regret)})
        for record, regret in zip(records, average_regret(gaps))
    ]
    return RegretTrace(
        method=method,
        seed=seed,
        Cstar=cstar[0],
        records=records,
        Cstar_schedule=cstar if len(set(cstar)) > 1 else None,
    )


def run(
    sys: LinearSystem,
    config: AdaptiveConfig,
    *,
    schedule: Sequence[PlantSwitch] = (),
    on_step: Optional[Callable[[AdaptiveState], None]] = None,
) -> RegretTrace:
    """
    Initialize from offline data and run ``config.T`` online steps.

    One record is written per gain K_t, t = t0, ..., t0 + T - 1, with the
    true cost C(K_t) (evaluation only), the data-driven cost of the running
    policy and the SNR diagnostics of the data used so far.

    Args:
        sys: True plant (and weights) at t = 0
        config: Run parameters
        schedule: Optional plant switches; C* follows the active plant
        on_step: Optional callback receiving every new state

    Raises:
        DestabilizedError: If some K_t fails to stabilize the active plant
    """
    state = initialize(
        sys,
        config.t0,
        config.offline_input,
        config.batch_noise,
        config.seed,
        eta=config.eta,
        probe=config.probe,
        forgetting=config.forgetting,
        initial_gain=config.initial_gain,
    )
    optimal: Dict[int, float] = {}
    records: List[StepRecord] = []
    cstar: List[float] = []

    for _ in range(config.T):
        plant = plant_at(sys, schedule, state.t)
        if id(plant) not in optimal:
            optimal[id(plant)] = optimal_gain(plant)[1]
        checked = evaluate_gain(plant, state.K_t, state.t)
        J_t = cost(state.cov, state.V_t_prime, plant.Q, plant.R).J
        record_t = state.t
        sigma = state.sigma_min_D0
        snr = snr_db(sigma, state.noise_norm)
        rho = checked.rho

        state = step(state, plant, config.noise)
        if on_step is not None:
            on_step(state)
        records.append(
            StepRecord(
                t=record_t,
                cost_true=lqr_cost(plant, checked),
                J_t=J_t,
                snr_db=snr,
                sigma_min_D0=sigma,
                rho_closed_loop=rho,
                stage_cost=state.stage_cost,
                gain_step=state.gain_step,
                event_flags="|".join(state.events),
            )
        )
        cstar.append(optimal[id(plant)])
        logger.debug(f"t={record_t}: C(K_t) = {records[-1].cost_true:.6g}")

    trace = finalize_trace("deepo", config.seed, records, cstar)
    logger.info(
        f"DeePO run finished: final gap {trace.gaps()[-1]:.3e}, "
        f"average regret {trace.avg_regret()[-1]:.3e}"
    )
    return trace


def sample_complexity(trace: RegretTrace, targets: Sequence[float]) -> Dict[float, Optional[int]]:
    """
    First time index at which the relative gap (C(K_t) - C*)/C* falls to each
    target. For the direct learner the time index is the number of
    input-state pairs used, offline batch included. None when never met.
    """
    gaps = trace.relative_gaps()
    times = [r.t for r in trace.records]
    hits: Dict[float, Optional[int]] = {}
    for target in targets:
        met = np.nonzero(gaps <= target)[0]
        hits[target] = int(times[met[0]]) if met.size else None
    return hits


__all__ = [
    "collect_offline_batch",
    "initialize",
    "recursive_policy_update",
    "closed_loop_sample",
    "sample",
    "projected_step",
    "update",
    "step",
    "run",
    "plant_at",
    "evaluate_gain",
    "finalize_trace",
    "sample_complexity",
    "snr_db",
]
