"""
Tests for the direct adaptive learner.
"""
from unittest.mock import patch

import numpy as np
import pytest

from deepo.core.config import settings
from deepo.core.errors import DestabilizedError, RankDeficientError
from deepo.schemas.adaptive import AdaptiveConfig, PlantSwitch
from deepo.schemas.data import NoiseModel
from deepo.schemas.system import GainK
from deepo.schemas.trace import StepRecord, average_regret
from deepo.services import adaptive
from deepo.services.covariance_lqr import cost, gradient, hessian_quadratic_form, objective
from deepo.services.data_engine import rank_one_update
from deepo.services.experiments import adaptive_config, build_config, build_system
from deepo.services.lqr_model import optimal_gain
from deepo.services.numerics import project_nullspace
from deepo.utils.random import make_rng


def _state(system, *, t0=20, eta=0.01, seed=0, noise=None):
    return adaptive.initialize(
        system,
        t0,
        NoiseModel.gaussian(1.0),
        noise if noise is not None else NoiseModel.gaussian(0.01),
        seed,
        eta=eta,
    )


class TestInitialization:
    """Test suite for the offline phase."""

    def test_offline_batch_is_shared_across_calls(self, reference):
        first = adaptive.collect_offline_batch(
            reference, 8, NoiseModel.gaussian(1.0), NoiseModel.gaussian(0.1), 4
        )
        second = adaptive.collect_offline_batch(
            reference, 8, NoiseModel.gaussian(1.0), NoiseModel.gaussian(0.1), 4
        )
        np.testing.assert_array_equal(first.U0, second.U0)
        np.testing.assert_array_equal(first.X1, second.X1)

    def test_too_short_offline_phase(self, reference):
        with pytest.raises(RankDeficientError):
            adaptive.collect_offline_batch(
                reference, 5, NoiseModel.gaussian(1.0), NoiseModel.none(), 0
            )

    def test_initial_gain_is_recovered_from_the_policy(self, reference):
        state = _state(reference)

        assert state.t == 20
        assert state.V_t_prime.feasible
        np.testing.assert_allclose(state.cov.U_bar @ state.V_t_prime.V, state.K_t.K,
                                   atol=1e-10)

    def test_initial_gain_override(self, reference):
        K0 = np.zeros((2, 4))
        state = adaptive.initialize(
            reference, 20, NoiseModel.gaussian(1.0), NoiseModel.none(), 0, initial_gain=K0
        )
        np.testing.assert_allclose(state.K_t.K, K0, atol=1e-10)

    def test_noise_free_batch_starts_at_the_optimal_gain(self, reference):
        state = adaptive.initialize(
            reference, 8, NoiseModel.gaussian(1.0), NoiseModel.none(), 0
        )
        np.testing.assert_allclose(state.K_t.K, optimal_gain(reference)[0].K, atol=1e-8)


class TestStep:
    """Test suite for one closed-loop update."""

    def test_recursive_policy_matches_direct_inverse(self, reference):
        state = _state(reference)
        x, K = state.x, state.K_t.K
        u = K @ x + make_rng(0, "u").standard_normal(2)
        x_next = reference.A @ x + reference.B @ u
        psi = np.concatenate([u, x])

        recursive = adaptive.recursive_policy_update(state.cov, state.V_t_prime.V, psi)

        updated = rank_one_update(state.cov, x, u, x_next)
        direct = np.linalg.solve(updated.Phi, np.vstack([K, np.eye(4)]))
        np.testing.assert_allclose(recursive, direct, rtol=1e-9, atol=1e-10)

    def test_zero_stepsize_is_a_gain_fixed_point(self, reference):
        state = _state(reference, eta=0.0)
        K0 = state.K_t.K
        for _ in range(25):
            state = adaptive.step(state, reference, NoiseModel.gaussian(0.01))
            np.testing.assert_allclose(state.K_t.K, K0, atol=1e-10)
        assert state.t == 45

    def test_step_advances_covariances_and_invariants(self, reference):
        state = _state(reference)
        next_state = adaptive.step(state, reference, NoiseModel.gaussian(0.01))

        assert next_state.cov.t == next_state.t == state.t + 1
        np.testing.assert_allclose(
            next_state.cov.U_bar @ next_state.V_t_prime.V, next_state.K_t.K, atol=1e-10
        )
        np.testing.assert_allclose(
            next_state.cov.X0_bar @ next_state.V_t_prime.V, np.eye(4), atol=1e-8
        )
        assert next_state.gain_step == pytest.approx(
            np.linalg.norm(next_state.K_t.K - state.K_t.K)
        )

    def test_direct_policy_update_agrees_with_recursion(self, reference):
        """Switching off the recursive update gives the same gains."""
        recursive = adaptive.step(_state(reference), reference, NoiseModel.gaussian(0.01))
        with patch.object(settings, "recursive_policy_update", False):
            direct = adaptive.step(_state(reference), reference, NoiseModel.gaussian(0.01))

        np.testing.assert_allclose(direct.K_t.K, recursive.K_t.K, atol=1e-9)

    def test_step_is_a_sample_then_an_update(self, reference):
        state = _state(reference)
        x, u, w, x_next = adaptive.sample(state, reference, NoiseModel.gaussian(0.01))
        split = adaptive.update(state, reference, x, u, x_next, w)
        whole = adaptive.step(state, reference, NoiseModel.gaussian(0.01))

        np.testing.assert_array_equal(split.K_t.K, whole.K_t.K)
        np.testing.assert_array_equal(split.noise_gram, whole.noise_gram)
        np.testing.assert_allclose(x_next, reference.A @ x + reference.B @ u + w)

    def test_update_without_noise_keeps_the_noise_gram(self, reference):
        state = _state(reference)
        x, u, _, x_next = adaptive.sample(state, reference, NoiseModel.gaussian(0.01))
        updated = adaptive.update(state, reference, x, u, x_next)
        np.testing.assert_array_equal(updated.noise_gram, state.noise_gram)

    def test_recursion_tracks_the_direct_inverse_over_a_long_run(self, reference):
        """V_{t+1} from the recursion equals Phi_{t+1}^{-1}[K_t; I] for 500 samples."""
        state = _state(reference)
        noise = NoiseModel.gaussian(0.01)
        for _ in range(500):
            x, u, w, x_next = adaptive.sample(state, reference, noise)
            psi = np.concatenate([u, x])
            recursive = adaptive.recursive_policy_update(state.cov, state.V_t_prime.V, psi)
            updated = rank_one_update(state.cov, x, u, x_next)
            direct = np.linalg.solve(updated.Phi, np.vstack([state.K_t.K, np.eye(4)]))
            np.testing.assert_allclose(recursive, direct, rtol=1e-7, atol=1e-8)
            state = adaptive.update(state, reference, x, u, x_next, w)
        assert state.t == 520


class TestProjectedStep:
    """Test suite for the safeguarded online gradient step."""

    def test_step_never_raises_the_cost(self, noisy_cov, feasible_policy, small_system):
        Q, R = small_system.Q, small_system.R
        before = objective(noisy_cov, feasible_policy, Q, R)

        for eta in (1e-3, 1.0, 1e3):
            policy, events = adaptive.projected_step(noisy_cov, feasible_policy, Q, R, eta)
            assert policy.feasible
            assert "hold" not in events
            assert objective(noisy_cov, policy, Q, R) <= before * (1 + 1e-12)

    def test_large_stepsize_is_capped_by_the_curvature(self, noisy_cov, feasible_policy,
                                                       small_system):
        Q, R = small_system.Q, small_system.R
        bundle = cost(noisy_cov, feasible_policy, Q, R)
        G = project_nullspace(noisy_cov.X0_bar, gradient(noisy_cov, feasible_policy, Q, R, bundle))
        kappa = hessian_quadratic_form(noisy_cov, feasible_policy, G, Q, R, bundle) / np.sum(G * G)

        policy, _ = adaptive.projected_step(noisy_cov, feasible_policy, Q, R, 1e6)

        taken = np.linalg.norm(policy.V - feasible_policy.V) / np.linalg.norm(G)
        assert kappa > 0
        assert taken <= (1 + 1e-9) / kappa

    def test_small_stepsize_is_used_as_given(self, noisy_cov, feasible_policy, small_system):
        Q, R = small_system.Q, small_system.R
        G = project_nullspace(noisy_cov.X0_bar, gradient(noisy_cov, feasible_policy, Q, R))

        policy, events = adaptive.projected_step(noisy_cov, feasible_policy, Q, R, 1e-6)

        assert events == []
        np.testing.assert_allclose(policy.V, feasible_policy.V - 1e-6 * G, atol=1e-14)

    def test_no_admissible_step_keeps_the_policy(self, noisy_cov, feasible_policy,
                                                 small_system):
        with patch.object(settings, "min_step", 1e6):
            policy, events = adaptive.projected_step(
                noisy_cov, feasible_policy, small_system.Q, small_system.R, 0.01
            )
        assert events == ["hold"]
        np.testing.assert_array_equal(policy.V, feasible_policy.V)


class TestRun:
    """Test suite for whole closed-loop runs."""

    def test_run_is_deterministic_in_the_seed(self, reference):
        config = AdaptiveConfig(t0=8, T=40, noise=NoiseModel.uniform(0.01), seed=3)
        first = adaptive.run(reference, config).to_frame()
        second = adaptive.run(reference, config).to_frame()
        assert first.equals(second)

    def test_records_cover_every_gain(self, reference):
        config = AdaptiveConfig(t0=8, T=30, seed=1)
        trace = adaptive.run(reference, config)

        assert [r.t for r in trace.records] == list(range(8, 38))
        np.testing.assert_allclose(
            [r.regret_avg for r in trace.records], trace.avg_regret()
        )
        assert trace.Cstar == pytest.approx(optimal_gain(reference)[1])

    def test_noise_free_run_closes_the_gap(self, reference):
        config = AdaptiveConfig(t0=8, T=300, seed=2, initial_gain=np.zeros((2, 4)))
        gaps = adaptive.run(reference, config).relative_gaps()
        assert gaps[0] > 0
        assert gaps[-1] < 0.5 * gaps[0]

    def test_noise_free_run_stays_at_the_optimal_gain(self):
        """Starting at K* on noise-free data, 1000 online steps never drift away from it."""
        config = build_config("adaptive-regret", seeds=[2])
        system = build_system(config.system, 2)
        run_config = adaptive_config(config, 2, noise=NoiseModel.none())
        states = []

        adaptive.run(system, run_config, on_step=states.append)

        K_star = optimal_gain(system)[0].K
        assert run_config.t0 == 8 and run_config.T == 1000
        assert np.linalg.norm(states[-1].K_t.K - K_star) <= 1e-6
        assert not any("hold" in state.events for state in states)

    def test_callback_sees_every_state(self, reference):
        seen = []
        adaptive.run(reference, AdaptiveConfig(t0=8, T=5), on_step=lambda s: seen.append(s.t))
        assert seen == [9, 10, 11, 12, 13]

    def test_switch_changes_the_reference_cost(self, reference):
        switched = reference.model_copy(update={"Q": 2.0 * reference.Q})
        schedule = [PlantSwitch(at=15, system=switched)]

        trace = adaptive.run(reference, AdaptiveConfig(t0=8, T=20), schedule=schedule)

        assert trace.Cstar_schedule is not None
        assert trace.Cstar_schedule[0] == pytest.approx(optimal_gain(reference)[1])
        assert trace.Cstar_schedule[-1] == pytest.approx(optimal_gain(switched)[1])
        assert adaptive.plant_at(reference, schedule, 14) is reference
        assert adaptive.plant_at(reference, schedule, 15) is switched


class TestRegret:
    """Test suite for regret bookkeeping and sample complexity."""

    def test_average_regret(self):
        np.testing.assert_allclose(average_regret([4.0, 2.0, 0.0]), [4.0, 3.0, 2.0])

    def test_sample_complexity_reports_first_hits(self):
        records = [
            StepRecord(
                t=t, cost_true=cost, J_t=cost, snr_db=0.0, sigma_min_D0=1.0,
                rho_closed_loop=0.5, stage_cost=0.0, gain_step=0.0,
            )
            for t, cost in zip(range(10, 14), [3.0, 1.5, 1.05, 1.2])
        ]
        trace = adaptive.finalize_trace("deepo", 0, records, [1.0] * 4)

        hits = adaptive.sample_complexity(trace, [1.0, 0.1, 0.01])

        assert hits == {1.0: 11, 0.1: 12, 0.01: None}

    def test_destabilizing_gain_is_reported(self, reference):
        with pytest.raises(DestabilizedError) as excinfo:
            adaptive.evaluate_gain(reference, GainK(K=10 * np.ones((2, 4))), 7)
        assert excinfo.value.details["t"] == 7

    def test_snr_db(self):
        assert adaptive.snr_db(10.0, 1.0) == pytest.approx(20.0)
        assert adaptive.snr_db(1.0, 0.0) == float("inf")


@pytest.mark.slow
class TestBenchmark:
    """Acceptance runs on the Laplacian benchmark."""

    def test_reaches_small_gap_within_200_steps(self, laplacian):
        config = AdaptiveConfig(t0=8, T=200, noise=NoiseModel.gaussian(0.1), seed=0)
        trace = adaptive.run(laplacian, config)
        assert np.min(trace.relative_gaps()) <= 1e-3
