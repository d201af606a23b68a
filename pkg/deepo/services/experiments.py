"""
Experiment runner: binds plants, noise and algorithm settings to seeded
runs, writes per-seed CSV traces plus summaries and evaluates the in-run
acceptance checks of every experiment.
"""
import math
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import pandas as pd
from pydantic import ValidationError
from tenacity import RetryError, retry, retry_if_exception_type, stop_after_attempt

from deepo.core.config import settings
from deepo.core.errors import (
    DestabilizedError,
    DivergenceError,
    ExperimentConfigError,
    GenerationError,
    InfeasibleError,
    RankDeficientError,
    SchemaError,
)
from deepo.core.logging import logger, run_context
from deepo.schemas.adaptive import AdaptiveConfig, PlantSwitch
from deepo.schemas.baselines import ComplexityRow
from deepo.schemas.data import DataBatch, NoiseModel
from deepo.schemas.experiment import (
    Check,
    ExperimentConfig,
    ExperimentResult,
    SummaryRecord,
    SystemSpec,
)
from deepo.schemas.policy import OFFLINE_TRACE_COLUMNS, DescentRecord
from deepo.schemas.system import GainK, LinearSystem
from deepo.schemas.trace import RegretTrace
from deepo.services import adaptive, baselines
from deepo.services.covariance_lqr import ce_gain, estimate_system, k_to_v, offline_deepo
from deepo.services.data_engine import build_covariances, random_batch
from deepo.services.lqr_model import (
    benchmark_laplacian,
    lqr_cost,
    optimal_gain,
    random_system,
    reference_system,
    stage_cost,
)
from deepo.utils.io import (
    dump_trajectory,
    ensure_dir,
    load_yaml,
    write_frame,
    write_json,
    write_metadata,
)
from deepo.utils.random import make_rng

KeyT = TypeVar("KeyT")

# Rollouts (zeroth order) and input-state pairs (DeePO) per relative-gap
# target on the Laplacian benchmark with Q = 10 I.
ZO_REFERENCE = {1.0: 1393, 0.1: 45260, 0.01: 151607}
DEEPO_REFERENCE = {1.0: 10, 0.1: 25, 0.01: 49}
ZO_BAND = (0.2, 5.0)
DEEPO_BAND = (0.3, 3.0)

EXPERIMENTS: Dict[str, Tuple[str, str]] = {
    "offline-convergence": (
        "offline",
        "Offline projected gradient descent converges to the CE optimum at a linear rate",
    ),
    "adaptive-regret": (
        "adaptive",
        "Average regret decays sublinearly to a floor ordered by the noise level",
    ),
    "compare-indirect": (
        "compare-indirect",
        "DeePO and indirect adaptive control reach the same gap; DeePO gains move more smoothly",
    ),
    "finite-horizon-cost": (
        "finite-cost",
        "Cumulative closed-loop cost of DeePO and the indirect method stays close",
    ),
    "timing": (
        "timing",
        "A DeePO update is cheaper than a per-step Riccati solve, increasingly with n = m",
    ),
    "time-to-accuracy": (
        "time-to-accuracy",
        "DeePO reaches small optimality gaps in less update time than the indirect method",
    ),
    "zo-sample-complexity": (
        "zo-complexity",
        "Zeroth-order policy optimization needs orders of magnitude more samples than DeePO",
    ),
    "tracking": (
        "tracking",
        "A forgetting factor lets DeePO re-converge after an abrupt plant change",
    ),
}

SUBCOMMANDS = {subcommand: name for name, (subcommand, _) in EXPERIMENTS.items()}

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "offline-convergence": {
        "system": {"kind": "reference"},
        "eta": 0.1,
        "batch_length": 8,
        "max_iters": 500,
    },
    "adaptive-regret": {
        "system": {"kind": "random", "n": 4, "m": 2},
        "noise": {"kind": "uniform", "sigma": 0.01},
        "sigmas": [0.1, 0.01, 0.001],
        "eta": 0.01,
        "t0": 8,
        "T": 1000,
        "seeds": list(range(20)),
    },
    "compare-indirect": {
        "system": {"kind": "laplacian"},
        "noise": {"kind": "gaussian", "sigma": 0.1},
        "eta": 0.01,
        "t0": 8,
        "T": 200,
    },
    "finite-horizon-cost": {
        "system": {"kind": "laplacian"},
        "noise": {"kind": "gaussian", "sigma": 0.1},
        "eta": 0.01,
        "t0": 8,
        "T": 200,
        "seeds": list(range(50)),
    },
    "timing": {
        "noise": {"kind": "gaussian", "sigma": 0.1},
        "dims": [10, 20, 30],
        "trials": 50,
    },
    "time-to-accuracy": {
        "system": {"kind": "random", "n": 4, "m": 4, "identity_input": True},
        "noise": {"kind": "gaussian", "sigma": 0.01},
        "eta": 0.01,
        "t0": 12,
        "T": 3000,
        "targets": [1e-2, 1e-3, 1e-4, 1e-5],
        "seeds": list(range(50)),
    },
    "zo-sample-complexity": {
        "system": {"kind": "laplacian", "state_weight": 10.0},
        "noise": {"kind": "gaussian", "sigma": 0.1},
        "eta": 0.01,
        "t0": 8,
        "T": 200,
        "initial_gain": [[-0.15, 0.0, 0.0], [0.0, -0.15, 0.0], [0.0, 0.0, -0.15]],
        "seeds": [0, 1, 2, 3, 4],
    },
    "tracking": {
        "system": {"kind": "random", "n": 4, "m": 2, "rho_band": [0.5, 0.8]},
        "noise": {"kind": "uniform", "sigma": 0.01},
        "eta": 0.01,
        "t0": 8,
        "T": 600,
        "switch_at": 200,
        "compare_forgetting": 0.99,
    },
}


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_config(
    experiment: str,
    config_path: Optional[str] = None,
    *,
    seeds: Optional[List[int]] = None,
    output_dir: Optional[str] = None,
    save_trajectory: bool = False,
) -> ExperimentConfig:
    """
    Experiment defaults, overlaid by the YAML file, overlaid by CLI flags.

    Raises:
        ExperimentConfigError: If the file or the merged config is invalid
    """
    if experiment not in EXPERIMENTS:
        raise ExperimentConfigError(f"unknown experiment {experiment!r}")
    data = _merge({"experiment": experiment}, DEFAULTS[experiment])
    if config_path is not None:
        loaded = load_yaml(config_path)
        if loaded.get("experiment", experiment) != experiment:
            raise ExperimentConfigError(
                f"config is for {loaded['experiment']!r}, not {experiment!r}"
            )
        data = _merge(data, loaded)
    if seeds is not None:
        data["seeds"] = seeds
    data.setdefault("output_dir", settings.output_dir)
    if output_dir is not None:
        data["output_dir"] = output_dir
    if save_trajectory:
        data["save_trajectory"] = True
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ExperimentConfigError(
            f"invalid {experiment} config: {e.error_count()} error(s)",
            errors=e.errors(include_url=False, include_context=False),
        ) from e


def build_system(spec: SystemSpec, seed: int) -> LinearSystem:
    if spec.kind == "reference":
        return reference_system()
    if spec.kind == "laplacian":
        return benchmark_laplacian(spec.state_weight)
    system = random_system(
        spec.n,
        spec.m,
        seed,
        rho_band=(spec.rho_band[0], spec.rho_band[1]),
        identity_input=spec.identity_input,
    )
    if spec.state_weight != 1.0:
        system = system.model_copy(update={"Q": spec.state_weight * np.eye(spec.n)})
    return system


def adaptive_config(
    config: ExperimentConfig,
    seed: int,
    *,
    noise: Optional[NoiseModel] = None,
    forgetting: Optional[float] = None,
) -> AdaptiveConfig:
    return AdaptiveConfig(
        t0=config.t0,
        T=config.T,
        eta=config.eta,
        probe=NoiseModel.gaussian(config.probe_scale),
        noise=noise if noise is not None else config.noise,
        forgetting=config.forgetting if forgetting is None else forgetting,
        seed=seed,
        initial_gain=config.initial_gain,
    )


def fan_out(
    experiment: str,
    keys: Sequence[KeyT],
    fn: Callable[[KeyT], Any],
    seed_of: Optional[Callable[[KeyT], Optional[int]]] = None,
) -> List[Any]:
    """
    Run ``fn`` over ``keys`` on ``settings.max_workers`` threads; results come
    back in key order.
    """
    seed_of = seed_of or (lambda key: key)

    def tagged(key: KeyT) -> Any:
        with run_context(experiment, seed_of(key)):
            return fn(key)

    if settings.max_workers <= 1:
        return [tagged(key) for key in keys]
    with ThreadPoolExecutor(max_workers=settings.max_workers) as pool:
        return list(pool.map(tagged, keys))


def loglog_slope(index: np.ndarray, values: np.ndarray) -> Optional[float]:
    """
    Least-squares slope of log(values) against log(index) over the whole
    index, keeping points with positive index and positive finite values.
    """
    index = np.asarray(index, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return None
    keep = (values > 0) & np.isfinite(values) & (index > 0)
    if np.count_nonzero(keep) < 2:
        return None
    slope, _ = np.polyfit(np.log10(index[keep]), np.log10(values[keep]), 1)
    return float(slope)


def summarize_frames(
    frames: Sequence[pd.DataFrame],
    column: str,
    index_column: str,
    label: str = "",
    *,
    fit_offset: float = 0.0,
) -> SummaryRecord:
    """
    Per-index mean, median and quartiles of ``column`` across frames.

    The slope is fitted against (index - fit_offset).

    Raises:
        SchemaError: If the frames disagree on columns or index values
    """
    if not frames:
        raise SchemaError("nothing to summarize")
    reference = frames[0]
    for frame in frames[1:]:
        if list(frame.columns) != list(reference.columns):
            raise SchemaError(
                "traces do not share a column schema",
                expected=list(reference.columns),
                found=list(frame.columns),
            )
        if not np.array_equal(frame[index_column].to_numpy(), reference[index_column].to_numpy()):
            raise SchemaError(f"traces do not share the {index_column} index")
    stacked = np.vstack([frame[column].to_numpy(dtype=float) for frame in frames])
    index = reference[index_column].to_numpy(dtype=float)
    mean = stacked.mean(axis=0)
    return SummaryRecord(
        label=label,
        column=column,
        index=index.tolist(),
        mean=mean.tolist(),
        median=np.median(stacked, axis=0).tolist(),
        q25=np.percentile(stacked, 25, axis=0).tolist(),
        q75=np.percentile(stacked, 75, axis=0).tolist(),
        count=len(frames),
        slope=loglog_slope(index - fit_offset, mean),
    )


def summarize(traces: Sequence[RegretTrace], column: str = "regret_avg") -> SummaryRecord:
    """
    Summary statistics of a set of regret traces; the slope is fitted
    against the running time T = t - t0 + 1.

    Raises:
        SchemaError: If the traces have no records or do not share the t index
    """
    if not traces or any(not trace.records for trace in traces):
        raise SchemaError("summarize needs non-empty traces")
    frames = [trace.to_frame() for trace in traces]
    first_t = traces[0].records[0].t
    label = traces[0].method
    return summarize_frames(frames, column, "t", label, fit_offset=first_t - 1)


def _out(config: ExperimentConfig) -> Path:
    return ensure_dir(Path(config.output_dir) / config.experiment)


def _write_summary(
    summary: SummaryRecord, directory: Path, stem: str, result: ExperimentResult
) -> None:
    path = write_frame(summary.to_frame(), directory / f"{stem}.csv")
    result.artifacts.append(str(path))


def _check(result: ExperimentResult, name: str, passed: bool, detail: str) -> None:
    result.checks.append(Check(name=name, passed=bool(passed), detail=detail))
    log = logger.info if passed else logger.warning
    log(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")


def robust_median(values: Sequence[Optional[float]]) -> Optional[float]:
    """
    Median with misses (None or NaN) ranked above every hit. None when the
    median itself falls on a miss.
    """
    filled = [math.inf if v is None or math.isnan(v) else float(v) for v in values]
    if not filled:
        return None
    median = float(np.median(filled))
    return median if math.isfinite(median) else None


def _misses(values: Sequence[Optional[float]]) -> int:
    return sum(v is None or math.isnan(v) for v in values)


def _save_trajectory(
    config: ExperimentConfig, result: ExperimentResult, batch: DataBatch, stem: str
) -> None:
    if config.save_trajectory:
        path = dump_trajectory(batch, _out(config) / f"{stem}.csv")
        result.artifacts.append(str(path))


def _adaptive_batch(system: LinearSystem, run_config: AdaptiveConfig) -> DataBatch:
    return adaptive.collect_offline_batch(
        system, run_config.t0, run_config.offline_input, run_config.batch_noise, run_config.seed
    )


def _check_dropouts(
    result: ExperimentResult, config: ExperimentConfig, dropped: Sequence[int]
) -> None:
    if len(dropped) == len(config.seeds):
        raise GenerationError("no seed produced a stabilizing initial gain", seeds=config.seeds)
    _check(
        result,
        "dropouts",
        len(dropped) <= config.max_dropout * len(config.seeds),
        f"{len(dropped)} of {len(config.seeds)} seeds dropped: {list(dropped)}",
    )


def _is_initial_failure(error: DestabilizedError, t0: int) -> bool:
    return error.details.get("t") == t0


def _draw_feasible_offline(system: LinearSystem, config: ExperimentConfig, seed: int):
    rng = make_rng(seed, "offline-batch")

    @retry(
        stop=stop_after_attempt(settings.generation_attempts),
        retry=retry_if_exception_type((InfeasibleError, RankDeficientError)),
    )
    def draw():
        batch = random_batch(system, config.batch_length, rng)
        cov = build_covariances(batch)
        V0 = k_to_v(cov, np.zeros((system.m, system.n)))
        if not V0.feasible:
            raise InfeasibleError(f"V0 = Phi^-1 [0; I] is infeasible (rho = {V0.rho:.4f})")
        _, J_star = ce_gain(*estimate_system(batch), system.Q, system.R)
        return batch, cov, V0, J_star

    try:
        return draw()
    except RetryError as e:
        raise GenerationError(
            f"no batch with a feasible V0 after {settings.generation_attempts} draws", seed=seed
        ) from e


def run_offline_convergence(config: ExperimentConfig) -> ExperimentResult:
    result = ExperimentResult(experiment=config.experiment)
    out = _out(config)

    def one(seed: int) -> pd.DataFrame:
        system = build_system(config.system, seed)
        _, cov, V0, J_star = _draw_feasible_offline(system, config, seed)
        records: List[DescentRecord] = []
        offline_deepo(
            cov, V0, config.eta, config.max_iters, config.grad_tol, system.Q, system.R,
            records=records,
        )
        frame = pd.DataFrame([r.model_dump() for r in records])
        frame["rel_gap"] = (frame["J"] - J_star) / J_star
        return frame[OFFLINE_TRACE_COLUMNS]

    frames = fan_out(config.experiment, config.seeds, one)
    for seed, frame in zip(config.seeds, frames):
        result.artifacts.append(str(write_frame(frame, out / f"offline_seed{seed}.csv")))
        J = frame["J"].to_numpy()
        monotone = bool(np.all(np.diff(J) <= 1e-12 * np.abs(J[:-1])))
        final_gap = float(frame["rel_gap"].iloc[-1])
        _check(result, f"monotone[seed={seed}]", monotone, f"{len(J) - 1} iterations")
        _check(
            result,
            f"final-gap[seed={seed}]",
            final_gap <= 1e-6,
            f"relative gap {final_gap:.3e}",
        )
    if len({len(frame) for frame in frames}) == 1:
        summary = summarize_frames(frames, "rel_gap", "iter", "offline")
        _write_summary(summary, out, "summary", result)
    return result


def _sigma_label(sigma: float) -> str:
    return f"{sigma:g}"


def _scaled(noise: NoiseModel, sigma: float) -> NoiseModel:
    if sigma == 0.0:
        return NoiseModel.none()
    return noise.model_copy(update={"sigma": sigma, "delta": sigma})


def run_adaptive_regret(config: ExperimentConfig) -> ExperimentResult:
    result = ExperimentResult(experiment=config.experiment)
    out = _out(config)
    sigmas = config.sigmas if config.sigmas is not None else [config.noise.sigma]
    keys = [(sigma, seed) for sigma in sigmas for seed in config.seeds]

    def run_config_of(sigma: float, seed: int) -> AdaptiveConfig:
        run_config = adaptive_config(config, seed, noise=_scaled(config.noise, sigma))
        if sigma == 0.0 and config.noise_free_offline_sigma > 0.0:
            offline_noise = _scaled(config.noise, config.noise_free_offline_sigma)
            run_config = run_config.model_copy(update={"offline_noise": offline_noise})
        return run_config

    def one(key: Tuple[float, int]) -> RegretTrace:
        sigma, seed = key
        system = build_system(config.system, seed)
        return adaptive.run(system, run_config_of(sigma, seed))

    traces = fan_out(config.experiment, keys, one, seed_of=lambda key: key[1])
    for sigma, seed in keys if config.save_trajectory else ():
        batch = _adaptive_batch(build_system(config.system, seed), run_config_of(sigma, seed))
        stem = f"trajectory_sigma{_sigma_label(sigma)}_seed{seed}"
        _save_trajectory(config, result, batch, stem)
    floors: Dict[float, float] = {}
    summaries: List[SummaryRecord] = []
    for sigma in sigmas:
        group = [trace for (s, _), trace in zip(keys, traces) if s == sigma]
        for trace in group:
            name = f"adaptive_sigma{_sigma_label(sigma)}_seed{trace.seed}.csv"
            result.artifacts.append(str(write_frame(trace.to_frame(), out / name)))
        summary = summarize(group)
        summary.label = f"sigma={_sigma_label(sigma)}"
        summaries.append(summary)
        _write_summary(summary, out, f"summary_sigma{_sigma_label(sigma)}", result)
        floors[sigma] = float(np.median([trace.avg_regret()[-1] for trace in group]))
        if sigma == 0.0:
            slope = summary.slope
            _check(
                result,
                "noise-free-slope",
                slope is not None and slope <= -0.5,
                f"log-log slope {slope}",
            )

    noisy = sorted(s for s in sigmas if s > 0)
    if len(noisy) > 1:
        ordered = all(floors[a] <= floors[b] for a, b in zip(noisy, noisy[1:]))
        detail = ", ".join(f"sigma={_sigma_label(s)}: {floors[s]:.3e}" for s in noisy)
        _check(result, "floors-ordered-in-sigma", ordered, detail)
    payload = [summary.model_dump(mode="json") for summary in summaries]
    result.artifacts.append(str(write_json(payload, out / "summary.json")))
    return result


def _paired_runs(
    config: ExperimentConfig, result: ExperimentResult
) -> List[Tuple[RegretTrace, RegretTrace]]:
    """
    DeePO and indirect runs per seed. Seeds whose offline gain does not
    stabilize the plant are dropped with a warning and counted in the
    "dropouts" check.
    """

    def one(seed: int) -> Optional[Tuple[RegretTrace, RegretTrace]]:
        system = build_system(config.system, seed)
        run_config = adaptive_config(config, seed)
        try:
            deepo_trace = adaptive.run(system, run_config)
        except DestabilizedError as e:
            if not _is_initial_failure(e, run_config.t0):
                raise
            logger.warning(f"Dropping seed {seed}: {e}")
            return None
        return deepo_trace, baselines.indirect_adaptive_run(system, run_config)

    outcomes = fan_out(config.experiment, config.seeds, one)
    dropped = [seed for seed, outcome in zip(config.seeds, outcomes) if outcome is None]
    _check_dropouts(result, config, dropped)
    pairs = [outcome for outcome in outcomes if outcome is not None]
    for deepo_trace, _ in pairs if config.save_trajectory else ():
        seed = deepo_trace.seed
        batch = _adaptive_batch(build_system(config.system, seed), adaptive_config(config, seed))
        _save_trajectory(config, result, batch, f"trajectory_seed{seed}")
    return pairs


def run_compare_indirect(config: ExperimentConfig) -> ExperimentResult:
    result = ExperimentResult(experiment=config.experiment)
    out = _out(config)
    pairs = _paired_runs(config, result)
    smooth_after = config.t0 + 20
    for deepo_trace, indirect_trace in pairs:
        seed = deepo_trace.seed
        for trace in (deepo_trace, indirect_trace):
            name = f"{trace.method}_seed{seed}.csv"
            result.artifacts.append(str(write_frame(trace.to_frame(), out / name)))
            hit = baselines.first_hit(trace, 1e-3)
            _check(
                result,
                f"{trace.method}-reaches-1e-3[seed={seed}]",
                hit is not None,
                f"first t with gap <= 1e-3: {hit}",
            )
    deepo_var, indirect_var = (
        float(np.mean([baselines.mean_gain_variation(pair[k], smooth_after) for pair in pairs]))
        for k in (0, 1)
    )
    _check(
        result,
        "deepo-smoother",
        deepo_var < indirect_var,
        f"mean gain step after t={smooth_after}: "
        f"DeePO {deepo_var:.3e}, indirect {indirect_var:.3e}",
    )
    for index, method in enumerate(("deepo", "indirect")):
        summary = summarize([pair[index] for pair in pairs])
        _write_summary(summary, out, f"summary_{method}", result)
    return result


def _offline_stage_cost(system: LinearSystem, config: ExperimentConfig, seed: int) -> float:
    batch = _adaptive_batch(system, adaptive_config(config, seed))
    return float(sum(stage_cost(system, batch.X0[:, k], batch.U0[:, k]) for k in range(batch.t)))


def run_finite_horizon_cost(config: ExperimentConfig) -> ExperimentResult:
    result = ExperimentResult(experiment=config.experiment)
    out = _out(config)
    pairs = _paired_runs(config, result)
    cumulative: Dict[str, List[np.ndarray]] = {"deepo": [], "indirect": []}
    for deepo_trace, indirect_trace in pairs:
        system = build_system(config.system, deepo_trace.seed)
        offset = _offline_stage_cost(system, config, deepo_trace.seed)
        for trace in (deepo_trace, indirect_trace):
            stages = np.array([r.stage_cost for r in trace.records])
            cumulative[trace.method].append(offset + np.cumsum(stages))
    t = np.array([r.t for r in pairs[0][0].records]) + 1
    deepo_mean = np.mean(cumulative["deepo"], axis=0)
    indirect_mean = np.mean(cumulative["indirect"], axis=0)
    frame = pd.DataFrame(
        {
            "t": t,
            "deepo_mean": deepo_mean,
            "indirect_mean": indirect_mean,
            "relative_difference": (deepo_mean - indirect_mean) / indirect_mean,
        }
    )
    result.artifacts.append(str(write_frame(frame, out / "finite_cost.csv")))
    final = float(abs(frame["relative_difference"].iloc[-1]))
    _check(result, "finite-cost-within-5%", final <= 0.05, f"relative difference {final:.3%}")
    return result


def _timing_config(config: ExperimentConfig, system: LinearSystem, seed: int) -> AdaptiveConfig:
    return adaptive_config(config, seed).model_copy(update={"t0": max(config.t0, 3 * system.n)})


def time_updates(
    n: int, config: ExperimentConfig, seed: int
) -> Tuple[List[float], List[float]]:
    """
    Wall-clock seconds of ``config.trials`` DeePO updates and of as many
    indirect updates (RLS plus Riccati solve) on one random n = m plant with
    B = I. Both learners consume the same transitions, sampled under the
    DeePO gain outside the timers.
    """
    system = random_system(n, n, seed, identity_input=True)
    run_config = _timing_config(config, system, seed)
    state = adaptive.initialize(
        system, run_config.t0, run_config.offline_input, run_config.batch_noise, seed,
        eta=run_config.eta, probe=run_config.probe,
    )
    rls = baselines.rls_init(_adaptive_batch(system, run_config))
    K, ce_cost = state.K_t.K, math.nan

    deepo_times: List[float] = []
    indirect_times: List[float] = []
    for _ in range(config.trials):
        x, u, w, x_next = adaptive.sample(state, system, run_config.noise)

        started = time.perf_counter()
        state = adaptive.update(state, system, x, u, x_next, w)
        deepo_times.append(time.perf_counter() - started)

        started = time.perf_counter()
        rls, K, ce_cost, _ = baselines.indirect_update(
            rls, x, u, x_next, system.Q, system.R, K, ce_cost
        )
        indirect_times.append(time.perf_counter() - started)
    return deepo_times, indirect_times


def run_timing(config: ExperimentConfig) -> ExperimentResult:
    result = ExperimentResult(experiment=config.experiment)
    out = _out(config)
    seed = config.seeds[0]
    rows = []
    for n in config.dims:
        with run_context(config.experiment, seed):
            deepo_times, indirect_times = time_updates(n, config, seed)
        for method, times in (("deepo", deepo_times), ("indirect", indirect_times)):
            rows.extend(
                {"n": n, "method": method, "trial": k, "seconds": s}
                for k, s in enumerate(times)
            )
        deepo_median = float(np.median(deepo_times))
        indirect_median = float(np.median(indirect_times))
        _check(
            result,
            f"deepo-faster[n={n}]",
            deepo_median < indirect_median,
            f"median DeePO {deepo_median * 1e3:.3f} ms vs indirect {indirect_median * 1e3:.3f} ms",
        )
    frame = pd.DataFrame(rows)
    result.artifacts.append(str(write_frame(frame, out / "timing.csv")))
    medians = frame.groupby(["n", "method"])["seconds"].median().reset_index()
    result.artifacts.append(str(write_frame(medians, out / "summary.csv")))
    return result


def _record_hits(hits: Dict[float, Optional[float]], gap: float, elapsed: float) -> bool:
    for target, seconds in hits.items():
        if seconds is None and gap <= target:
            hits[target] = elapsed
    return all(seconds is not None for seconds in hits.values())


def time_to_accuracy(
    system: LinearSystem, config: ExperimentConfig, seed: int
) -> Dict[str, List[Optional[float]]]:
    """
    Cumulative update seconds each method spends before its gain first
    reaches every relative gap in ``config.targets``; None for targets not
    reached within ``config.T`` samples.

    Each method runs its own closed loop from the same offline batch,
    initial gain and noise draws. Only the updates are timed.

    Raises:
        DestabilizedError: If the initial gain does not stabilize the plant
    """
    run_config = _timing_config(config, system, seed)
    C_star = optimal_gain(system)[1]
    initial = adaptive.initialize(
        system, run_config.t0, run_config.offline_input, run_config.batch_noise, seed,
        eta=run_config.eta, probe=run_config.probe,
    )
    adaptive.evaluate_gain(system, initial.K_t, run_config.t0)

    def gap(K: np.ndarray) -> float:
        return (lqr_cost(system, K) - C_star) / C_star

    deepo_hits: Dict[float, Optional[float]] = {target: None for target in config.targets}
    state, elapsed = initial, 0.0
    try:
        for _ in range(config.T):
            if _record_hits(deepo_hits, gap(state.K_t.K), elapsed):
                break
            x, u, w, x_next = adaptive.sample(state, system, run_config.noise)
            started = time.perf_counter()
            state = adaptive.update(state, system, x, u, x_next, w)
            elapsed += time.perf_counter() - started
        _record_hits(deepo_hits, gap(state.K_t.K), elapsed)
    except DivergenceError as e:
        logger.warning(f"DeePO closed loop diverged: {e}")

    indirect_hits: Dict[float, Optional[float]] = {target: None for target in config.targets}
    rls = baselines.rls_init(_adaptive_batch(system, run_config))
    K, ce_cost, x, elapsed = initial.K_t.K, math.nan, initial.x, 0.0
    try:
        for _ in range(config.T):
            if _record_hits(indirect_hits, gap(K), elapsed):
                break
            u, _, x_next = adaptive.closed_loop_sample(
                system, K, x, rls.t, run_config.probe, run_config.noise, seed
            )
            started = time.perf_counter()
            rls, K, ce_cost, _ = baselines.indirect_update(
                rls, x, u, x_next, system.Q, system.R, K, ce_cost
            )
            elapsed += time.perf_counter() - started
            x = x_next
        _record_hits(indirect_hits, gap(K), elapsed)
    except DivergenceError as e:
        logger.warning(f"Indirect closed loop diverged: {e}")

    return {
        "deepo": [deepo_hits[target] for target in config.targets],
        "indirect": [indirect_hits[target] for target in config.targets],
    }


def _seconds(value: Optional[float]) -> str:
    return "never" if value is None else f"{value * 1e3:.3f} ms"


def run_time_to_accuracy(config: ExperimentConfig) -> ExperimentResult:
    result = ExperimentResult(experiment=config.experiment)
    out = _out(config)
    rows = []
    dropped: List[int] = []
    for seed in config.seeds:
        system = build_system(config.system, seed)
        with run_context(config.experiment, seed):
            try:
                hits = time_to_accuracy(system, config, seed)
            except DestabilizedError as e:
                logger.warning(f"Dropping seed {seed}: {e}")
                dropped.append(seed)
                continue
        rows.extend(
            {
                "seed": seed,
                "method": method,
                "target_eps": target,
                "seconds": math.nan if seconds is None else seconds,
            }
            for method, per_target in hits.items()
            for target, seconds in zip(config.targets, per_target)
        )
    _check_dropouts(result, config, dropped)
    frame = pd.DataFrame(rows, columns=["seed", "method", "target_eps", "seconds"])
    result.artifacts.append(str(write_frame(frame, out / "time_to_accuracy.csv")))

    summary_rows = []
    medians: Dict[Tuple[str, float], Optional[float]] = {}
    for target in config.targets:
        for method in ("deepo", "indirect"):
            seconds = frame[(frame["target_eps"] == target) & (frame["method"] == method)]
            values = seconds["seconds"].tolist()
            medians[method, target] = robust_median(values)
            summary_rows.append(
                {
                    "target_eps": target,
                    "method": method,
                    "median_seconds": medians[method, target],
                    "misses": _misses(values),
                }
            )
    summary = pd.DataFrame(summary_rows)
    result.artifacts.append(str(write_frame(summary, out / "summary.csv")))

    smallest = min(config.targets)
    deepo_median, indirect_median = medians["deepo", smallest], medians["indirect", smallest]
    _check(
        result,
        f"deepo-faster[eps={smallest:g}]",
        deepo_median is not None and (indirect_median is None or deepo_median < indirect_median),
        f"median DeePO {_seconds(deepo_median)} vs indirect {_seconds(indirect_median)}",
    )
    return result


def _in_band(value: Optional[float], reference: float, band: Tuple[float, float]) -> bool:
    return value is not None and band[0] * reference <= value <= band[1] * reference


def run_zo_sample_complexity(config: ExperimentConfig) -> ExperimentResult:
    result = ExperimentResult(experiment=config.experiment)
    out = _out(config)
    K0 = (
        GainK(K=config.initial_gain)
        if config.initial_gain is not None
        else GainK(K=-0.15 * np.eye(3))
    )

    def one(seed: int) -> List[ComplexityRow]:
        system = build_system(config.system, seed)
        zo = config.zo.model_copy(update={"seed": seed})
        zo_rows = baselines.zeroth_order_po_run(system, K0, zo, config.targets)
        deepo_rows = baselines.deepo_sample_complexity(
            system, adaptive_config(config, seed), config.targets
        )
        return baselines.merge_complexity(zo_rows, deepo_rows)

    rows = [row for seed_rows in fan_out(config.experiment, config.seeds, one) for row in seed_rows]
    frame = pd.DataFrame([row.model_dump() for row in rows])
    result.artifacts.append(str(write_frame(frame, out / "sample_complexity.csv")))

    for target in config.targets:
        subset = frame[frame["target_eps"] == target]
        trajectories = subset["trajectories"].tolist()
        pairs = subset["pairs"].tolist()
        zo_median = robust_median(trajectories)
        deepo_median = robust_median(pairs)
        misses = f"misses: ZO {_misses(trajectories)}, DeePO {_misses(pairs)} of {len(subset)}"
        if target in ZO_REFERENCE:
            _check(
                result,
                f"zo-in-band[eps={target:g}]",
                _in_band(zo_median, ZO_REFERENCE[target], ZO_BAND),
                f"median {zo_median} vs reference {ZO_REFERENCE[target]} ({misses})",
            )
        if target in DEEPO_REFERENCE:
            _check(
                result,
                f"deepo-in-band[eps={target:g}]",
                _in_band(deepo_median, DEEPO_REFERENCE[target], DEEPO_BAND),
                f"median {deepo_median} vs reference {DEEPO_REFERENCE[target]} ({misses})",
            )
        _check(
            result,
            f"zo-over-deepo-100x[eps={target:g}]",
            zo_median is not None and deepo_median is not None and zo_median >= 100 * deepo_median,
            f"{zo_median} trajectories vs {deepo_median} pairs ({misses})",
        )
    return result


def switched_plant(system: LinearSystem, seed: int, scale: float) -> LinearSystem:
    """The plant with A perturbed by a random matrix of spectral norm ``scale``."""
    delta = make_rng(seed, "switch").standard_normal(system.A.shape)
    delta *= scale / np.linalg.norm(delta, 2)
    return system.model_copy(update={"A": system.A + delta})


def run_tracking(config: ExperimentConfig) -> ExperimentResult:
    result = ExperimentResult(experiment=config.experiment)
    out = _out(config)
    window = config.t0 + config.T - min(100, config.T // 4)

    def one(seed: int) -> Tuple[RegretTrace, RegretTrace]:
        system = build_system(config.system, seed)
        switched = switched_plant(system, seed, config.switch_scale)
        schedule = [PlantSwitch(at=config.switch_at, system=switched)]
        traces = []
        for forgetting in (config.compare_forgetting, 1.0):
            run_config = adaptive_config(config, seed, forgetting=forgetting)
            trace = adaptive.run(system, run_config, schedule=schedule)
            traces.append(trace.model_copy(update={"method": f"deepo-beta{forgetting:g}"}))
        return traces[0], traces[1]

    pairs = fan_out(config.experiment, config.seeds, one)
    late_gaps: Dict[str, List[float]] = {}
    for pair in pairs:
        for trace in pair:
            name = f"{trace.method}_seed{trace.seed}.csv"
            result.artifacts.append(str(write_frame(trace.to_frame(), out / name)))
            times = np.array([r.t for r in trace.records])
            late = trace.relative_gaps()[times >= window]
            late_gaps.setdefault(trace.method, []).append(float(np.mean(late)))
    forgetting_name = f"deepo-beta{config.compare_forgetting:g}"
    with_forgetting = float(np.median(late_gaps[forgetting_name]))
    without = float(np.median(late_gaps["deepo-beta1"]))
    _check(
        result,
        "forgetting-recovers",
        with_forgetting < without,
        f"late relative gap {with_forgetting:.3e} with forgetting vs {without:.3e} without",
    )
    return result


RUNNERS: Dict[str, Callable[[ExperimentConfig], ExperimentResult]] = {
    "offline-convergence": run_offline_convergence,
    "adaptive-regret": run_adaptive_regret,
    "compare-indirect": run_compare_indirect,
    "finite-horizon-cost": run_finite_horizon_cost,
    "timing": run_timing,
    "time-to-accuracy": run_time_to_accuracy,
    "zo-sample-complexity": run_zo_sample_complexity,
    "tracking": run_tracking,
}


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """
    Run one experiment end to end: per-seed CSVs, summaries, checks and a
    metadata.json with timestamps.
    """
    started = datetime.now(timezone.utc)
    logger.info(f"Running {config.experiment} over seeds {config.seeds}")
    with run_context(config.experiment):
        result = RUNNERS[config.experiment](config)
    result.artifacts.append(str(write_metadata(_out(config), config, started)))
    write_json(result, _out(config) / "checks.json")
    logger.info(
        f"{config.experiment}: {sum(c.passed for c in result.checks)}"
        f"/{len(result.checks)} checks passed"
    )
    return result


__all__ = [
    "EXPERIMENTS",
    "SUBCOMMANDS",
    "DEFAULTS",
    "build_config",
    "build_system",
    "adaptive_config",
    "fan_out",
    "loglog_slope",
    "summarize",
    "summarize_frames",
    "time_updates",
    "time_to_accuracy",
    "robust_median",
    "switched_plant",
    "run_experiment",
]
