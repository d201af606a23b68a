"""
Tests for the comparison methods: recursive least squares, indirect
adaptive control and zeroth-order policy optimization.
"""
from unittest.mock import patch

import numpy as np
import pytest

from deepo.core.errors import DestabilizedError, InfeasibleError, SingularUpdateError
from deepo.schemas.adaptive import AdaptiveConfig
from deepo.schemas.baselines import ComplexityRow, RlsState, ZoConfig
from deepo.schemas.data import DataBatch, NoiseModel
from deepo.schemas.system import GainK
from deepo.services import adaptive, baselines
from deepo.services.covariance_lqr import estimate_system
from deepo.services.data_engine import NoiseSampler, gaussian_input, simulate
from deepo.services.lqr_model import lqr_cost, policy_gradient
from deepo.utils.random import make_rng


class TestRecursiveLeastSquares:
    """Test suite for the RLS estimator."""

    def test_matches_batch_least_squares_after_500_steps(self, reference):
        t0, steps = 20, 500
        noise = NoiseSampler(NoiseModel.gaussian(0.1), 4, make_rng(0, "w"))
        batch = simulate(reference, gaussian_input(2, make_rng(0, "u")), noise, t0 + steps)
        head = DataBatch(X0=batch.X0[:, :t0], U0=batch.U0[:, :t0], X1=batch.X1[:, :t0])

        state = baselines.rls_init(head)
        for k in range(t0, t0 + steps):
            state = baselines.rls_update(state, batch.X0[:, k], batch.U0[:, k], batch.X1[:, k])

        A_hat, B_hat = estimate_system(batch)
        np.testing.assert_allclose(state.Theta_hat, np.hstack([B_hat, A_hat]), atol=1e-8)
        A_rls, _ = baselines.rls_model(state, 2)
        np.testing.assert_allclose(A_rls, A_hat, atol=1e-8)
        assert state.t == t0 + steps

    def test_degenerate_denominator(self):
        state = RlsState(Theta_hat=np.zeros((1, 2)), PhiInv=-np.eye(2), t=3)
        with pytest.raises(SingularUpdateError):
            baselines.rls_update(state, np.array([1.0]), np.array([0.0]), np.array([1.0]))


class TestIndirectAdaptive:
    """Test suite for certainty-equivalence adaptive control."""

    def test_shares_the_data_stream_with_deepo(self, reference):
        """On matched seeds both methods start from the same offline batch and gain."""
        config = AdaptiveConfig(t0=8, T=5, noise=NoiseModel.gaussian(0.1), seed=2)
        deepo_trace = adaptive.run(reference, config)
        indirect_trace = baselines.indirect_adaptive_run(reference, config)

        assert indirect_trace.method == "indirect"
        assert deepo_trace.records[0].cost_true == pytest.approx(
            indirect_trace.records[0].cost_true, rel=1e-8
        )
        assert deepo_trace.records[0].stage_cost == pytest.approx(
            indirect_trace.records[0].stage_cost, rel=1e-8
        )

    @patch("deepo.services.baselines.ce_gain")
    def test_holds_the_gain_when_the_estimate_is_infeasible(self, mock_ce_gain, reference):
        """
        Test that a failed Riccati solve keeps the previous gain.

        Args:
            mock_ce_gain: Mocked CE solver that always fails
        """
        mock_ce_gain.side_effect = InfeasibleError("no stabilizing solution")
        K0 = np.zeros((2, 4))
        config = AdaptiveConfig(t0=8, T=4, seed=0, initial_gain=K0)

        trace = baselines.indirect_adaptive_run(reference, config)

        assert all(r.event_flags == "hold" for r in trace.records)
        assert all(r.gain_step == 0.0 for r in trace.records)
        assert trace.records[-1].cost_true == pytest.approx(lqr_cost(reference, K0))

    def test_gain_variation(self, reference):
        trace = baselines.indirect_adaptive_run(reference, AdaptiveConfig(t0=8, T=20, seed=1))
        steps = [r.gain_step for r in trace.records if r.t >= 18]
        assert baselines.mean_gain_variation(trace, 18) == pytest.approx(np.mean(steps))
        assert np.isnan(baselines.mean_gain_variation(trace, 1000))


class TestZerothOrder:
    """Test suite for two-point zeroth-order policy optimization."""

    def test_directions_lie_on_the_unit_sphere(self):
        F = baselines.sphere_directions(make_rng(0, "zo"), 50, 3, 3)
        np.testing.assert_allclose(np.linalg.norm(F, axis=(1, 2)), 1.0)

    def test_two_point_estimate_aligns_with_the_gradient(self, laplacian):
        """With exact costs the estimator points along the model-based gradient."""
        K = -0.15 * np.eye(3)
        r = 0.02
        F = baselines.sphere_directions(make_rng(1, "zo"), 200, 3, 3)
        plus = np.array([lqr_cost(laplacian, K + r * f) for f in F])
        minus = np.array([lqr_cost(laplacian, K - r * f) for f in F])

        estimate = baselines.two_point_gradient(plus, minus, F, r)

        exact = policy_gradient(laplacian, K)
        cosine = np.sum(estimate * exact) / (np.linalg.norm(estimate) * np.linalg.norm(exact))
        assert cosine >= 0.5

    def test_silent_rollouts_from_rest_cost_nothing(self, laplacian):
        gains = np.stack([-0.15 * np.eye(3)] * 4)
        sampler = NoiseSampler(NoiseModel.none(), 3)
        np.testing.assert_array_equal(baselines.rollout_costs(laplacian, gains, 50, sampler),
                                      np.zeros(4))

    def test_rollout_cost_is_positive_under_noise(self, laplacian):
        gains = np.stack([-0.15 * np.eye(3)] * 4)
        sampler = NoiseSampler(NoiseModel.gaussian(0.1), 3, make_rng(0, "rollout"))
        costs = baselines.rollout_costs(laplacian, gains, 50, sampler)
        assert np.all(costs > 0)

    def test_unstable_initial_gain(self, laplacian):
        with pytest.raises(DestabilizedError):
            baselines.zeroth_order_po_run(laplacian, GainK(K=np.zeros((3, 3))), ZoConfig(), [1.0])

    def test_reports_trajectories_per_target(self, laplacian):
        zo = ZoConfig(max_iters=3, minibatch=4)
        rows = baselines.zeroth_order_po_run(
            laplacian, GainK(K=-0.15 * np.eye(3)), zo, [100.0, 1e-9]
        )

        assert [row.target_eps for row in rows] == [100.0, 1e-9]
        assert rows[0].trajectories == 0
        assert rows[1].trajectories is None

    def test_merge_complexity(self):
        zo_rows = [ComplexityRow(target_eps=1.0, trajectories=1400, seed=0)]
        deepo_rows = [ComplexityRow(target_eps=1.0, pairs=10, seed=0)]

        merged = baselines.merge_complexity(zo_rows, deepo_rows)

        assert merged[0].trajectories == 1400
        assert merged[0].pairs == 10
