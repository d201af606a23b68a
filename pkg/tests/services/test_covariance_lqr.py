"""
Tests for the covariance-parameterized LQR: cost, derivatives, offline
descent and the certainty-equivalence identity.
"""
import math

import numpy as np
import pytest

from deepo.core.errors import InfeasibleError
from deepo.schemas.policy import DescentRecord
from deepo.services.covariance_lqr import (
    ce_gain,
    cost,
    equivalence_check,
    estimate_system,
    evaluate_policy,
    gradient,
    hessian_quadratic_form,
    k_to_v,
    objective,
    offline_deepo,
    sublevel_bounds_hold,
    theory_constants,
    true_closed_loop,
    v_to_k,
)
from deepo.services.data_engine import build_covariances, random_batch
from deepo.services.experiments import _draw_feasible_offline, build_config
from deepo.services.lqr_model import lqr_cost, random_system
from deepo.services.numerics import nullspace_projector
from deepo.utils.random import make_rng


def _feasible_instance(seed: int):
    n, m = 2 + seed % 3, 1 + seed % 2
    system = random_system(n, m, seed, rho_band=(0.3, 0.7))
    batch = random_batch(system, 3 * (n + m), make_rng(seed, "instance"), noise_scale=0.01)
    cov = build_covariances(batch)
    policy = k_to_v(cov, np.zeros((m, n)))
    return system, cov, policy


def _nullspace_direction(cov, rng):
    Z = nullspace_projector(cov.X0_bar) @ rng.standard_normal((cov.m + cov.n, cov.n))
    return Z / np.linalg.norm(Z)


class TestParameterization:
    """Test suite for the K <-> V maps and feasibility."""

    def test_gain_round_trip(self, noisy_cov):
        K = make_rng(0, "gain").standard_normal((noisy_cov.m, noisy_cov.n))
        V = k_to_v(noisy_cov, K)

        np.testing.assert_allclose(v_to_k(noisy_cov, V).K, K, atol=1e-10)
        assert V.constraint_residual <= 1e-10

    def test_noise_free_data_reproduce_the_true_closed_loop(self, small_system):
        batch = random_batch(small_system, 12, make_rng(1, "clean"), noise_scale=0.0)
        cov = build_covariances(batch)
        K = make_rng(2, "gain").standard_normal((2, 4)) * 0.02
        V = k_to_v(cov, K)

        np.testing.assert_allclose(cov.X1_bar @ V.V, true_closed_loop(small_system, cov, V),
                                   atol=1e-10)
        assert cost(cov, V, small_system.Q, small_system.R).J == pytest.approx(
            lqr_cost(small_system, K), rel=1e-8
        )

    def test_constraint_violation_is_infeasible(self, noisy_cov, feasible_policy):
        shifted = evaluate_policy(noisy_cov, feasible_policy.V + 1e-3)
        assert not shifted.feasible
        assert shifted.constraint_residual > 1e-8

    def test_infeasible_policy_costs_infinity(self, noisy_cov, small_system):
        V = k_to_v(noisy_cov, 50.0 * np.ones((2, 4)))
        bundle = cost(noisy_cov, V, small_system.Q, small_system.R)

        assert not V.feasible
        assert math.isinf(bundle.J)
        assert bundle.P_V is None
        with pytest.raises(InfeasibleError):
            gradient(noisy_cov, V, small_system.Q, small_system.R)


class TestDerivatives:
    """Test suite for the gradient and Hessian quadratic form."""

    def test_gradient_matches_central_differences(self):
        h = 1e-5
        for seed in range(20):
            system, cov, policy = _feasible_instance(seed)
            rng = make_rng(seed, "directions")
            G = gradient(cov, policy, system.Q, system.R)
            for _ in range(5):
                Z = _nullspace_direction(cov, rng)
                plus = cost(cov, policy.V + h * Z, system.Q, system.R).J
                minus = cost(cov, policy.V - h * Z, system.Q, system.R).J
                finite = (plus - minus) / (2 * h)
                exact = float(np.sum(G * Z))
                assert abs(finite - exact) <= 1e-5 * max(1.0, abs(exact))

    def test_gradient_tracks_reweighted_inputs(self, noisy_cov, feasible_policy, small_system):
        """Doubling R changes the gradient consistently with finite differences."""
        h = 1e-5
        R = 2.0 * small_system.R
        Z = _nullspace_direction(noisy_cov, make_rng(5, "directions"))
        G = gradient(noisy_cov, feasible_policy, small_system.Q, R)

        plus = cost(noisy_cov, feasible_policy.V + h * Z, small_system.Q, R).J
        minus = cost(noisy_cov, feasible_policy.V - h * Z, small_system.Q, R).J
        exact = float(np.sum(G * Z))
        assert abs((plus - minus) / (2 * h) - exact) <= 1e-5 * max(1.0, abs(exact))

    def test_hessian_matches_second_differences(self):
        h = 1e-4
        for seed in range(10):
            system, cov, policy = _feasible_instance(seed)
            Z = _nullspace_direction(cov, make_rng(seed, "hessian"))
            center = cost(cov, policy, system.Q, system.R).J
            plus = cost(cov, policy.V + h * Z, system.Q, system.R).J
            minus = cost(cov, policy.V - h * Z, system.Q, system.R).J
            finite = (plus - 2 * center + minus) / h**2

            exact = hessian_quadratic_form(cov, policy, Z, system.Q, system.R)

            assert abs(finite - exact) <= 1e-3 * max(1.0, abs(exact))

    def test_sublevel_bounds(self, noisy_cov, feasible_policy, small_system):
        bundle = cost(noisy_cov, feasible_policy, small_system.Q, small_system.R)
        assert sublevel_bounds_hold(
            noisy_cov, feasible_policy, bundle, small_system.Q, small_system.R
        )

    def test_gradient_dominance(self):
        """J(V) - J* <= mu(a) ||Pi grad J(V)|| on the sublevel set of V."""
        for seed in range(20):
            system, cov, policy = _feasible_instance(seed)
            rng = make_rng(seed, "dominance")
            batch = random_batch(
                system, 3 * (system.n + system.m), make_rng(seed, "instance"), noise_scale=0.01
            )
            _, J_star = ce_gain(*estimate_system(batch), system.Q, system.R)
            Pi = nullspace_projector(cov.X0_bar)
            for _ in range(5):
                V = policy.V + 0.05 * _nullspace_direction(cov, rng)
                bundle = cost(cov, V, system.Q, system.R)
                if not bundle.feasible:
                    continue
                mu = theory_constants(cov, bundle.J, system.Q, system.R).mu
                projected = np.linalg.norm(Pi @ gradient(cov, V, system.Q, system.R, bundle))
                assert bundle.J - J_star <= mu * projected + 1e-9
                assert sublevel_bounds_hold(cov, V, bundle, system.Q, system.R)

    def test_theory_constants(self, noisy_cov, small_system):
        constants = theory_constants(noisy_cov, 10.0, small_system.Q, small_system.R)
        assert constants.mu > 0
        assert constants.l > 0
        with pytest.raises(ValueError):
            theory_constants(noisy_cov, 0.5, small_system.Q, small_system.R)

    def test_mu_scales_with_a_squared(self, noisy_cov, small_system):
        low = theory_constants(noisy_cov, 10.0, small_system.Q, small_system.R)
        high = theory_constants(noisy_cov, 20.0, small_system.Q, small_system.R)
        assert high.mu == pytest.approx(4.0 * low.mu, rel=1e-12)
        assert high.l > low.l

    def test_hessian_is_positive_semidefinite_at_the_optimum(self):
        """At V* = Phi^{-1}[K_ce; I] the curvature along the constraint is >= 0."""
        for seed in range(20):
            system, cov, _ = _feasible_instance(seed)
            batch = random_batch(
                system, 3 * (system.n + system.m), make_rng(seed, "instance"), noise_scale=0.01
            )
            K_ce, C_ce = ce_gain(*estimate_system(batch), system.Q, system.R)
            optimum = k_to_v(cov, K_ce)
            assert optimum.feasible
            rng = make_rng(seed, "curvature")
            for _ in range(5):
                Z = _nullspace_direction(cov, rng)
                curvature = hessian_quadratic_form(cov, optimum, Z, system.Q, system.R)
                assert curvature >= -1e-8 * max(1.0, C_ce)

    def test_objective_matches_the_cost_bundle(self, noisy_cov, feasible_policy, small_system):
        Q, R = small_system.Q, small_system.R
        assert objective(noisy_cov, feasible_policy, Q, R) == pytest.approx(
            cost(noisy_cov, feasible_policy, Q, R).J, rel=1e-10
        )
        unstable = k_to_v(noisy_cov, 50.0 * np.ones((2, 4)))
        assert math.isinf(objective(noisy_cov, unstable, Q, R))


class TestOfflineDescent:
    """Test suite for offline projected gradient descent."""

    def test_reaches_the_certainty_equivalence_optimum(self, reference):
        """t = 8, eta = 0.1, V0 = Phi^{-1}[0; I]: gap <= 1e-6 in 500 iterations."""
        config = build_config("offline-convergence")
        _, cov, V0, J_star = _draw_feasible_offline(reference, config, 0)
        records = []

        policy, trace = offline_deepo(
            cov, V0, 0.1, 500, 1e-12, reference.Q, reference.R, records=records
        )

        assert policy.feasible
        assert all(b <= a * (1 + 1e-12) for a, b in zip(trace, trace[1:]))
        assert (trace[-1] - J_star) / J_star <= 1e-6
        assert all(isinstance(r, DescentRecord) for r in records)
        assert records[0].J == trace[0]

    def test_inverse_smoothness_stepsize_descends_without_backtracking(
        self, noisy_cov, feasible_policy, small_system
    ):
        """eta = 1 / l(J(V0)) keeps the nominal stepsize and a non-increasing J."""
        Q, R = small_system.Q, small_system.R
        a = cost(noisy_cov, feasible_policy, Q, R).J
        eta = 1.0 / theory_constants(noisy_cov, a, Q, R).l
        records = []

        _, trace = offline_deepo(noisy_cov, feasible_policy, eta, 20, 0.0, Q, R, records=records)

        assert len(trace) == 21
        assert all(later <= earlier for earlier, later in zip(trace, trace[1:]))
        assert all(record.eta_used == eta for record in records)

    def test_iterates_stay_on_the_constraint(self, noisy_cov, feasible_policy, small_system):
        policy, _ = offline_deepo(
            noisy_cov, feasible_policy, 0.01, 50, 0.0, small_system.Q, small_system.R
        )
        assert policy.constraint_residual <= 1e-8

    def test_infeasible_start_is_rejected(self, noisy_cov, small_system):
        V = k_to_v(noisy_cov, 50.0 * np.ones((2, 4)))
        with pytest.raises(InfeasibleError):
            offline_deepo(noisy_cov, V, 0.01, 10, 0.0, small_system.Q, small_system.R)

    def test_non_positive_stepsize_is_rejected(self, noisy_cov, feasible_policy, small_system):
        with pytest.raises(ValueError):
            offline_deepo(
                noisy_cov, feasible_policy, 0.0, 10, 0.0, small_system.Q, small_system.R
            )


class TestCertaintyEquivalence:
    """Test suite for the equivalence between J* and the CE optimum."""

    def test_estimate_is_exact_without_noise(self, small_system):
        batch = random_batch(small_system, 10, make_rng(0, "ls"), noise_scale=0.0)
        A_hat, B_hat = estimate_system(batch)
        np.testing.assert_allclose(A_hat, small_system.A, atol=1e-10)
        np.testing.assert_allclose(B_hat, small_system.B, atol=1e-10)

    def test_gap_is_solver_error_only(self):
        for seed in range(50):
            system = random_system(4, 2, seed)
            batch = random_batch(system, 20, make_rng(seed, "ce"), noise_scale=0.01)
            cov = build_covariances(batch)

            report = equivalence_check(cov, batch, system.Q, system.R, max_iters=200)

            assert report.gap <= 1e-6

    def test_ce_gain_is_feasible_for_the_covariance_problem(self, noisy_batch, noisy_cov,
                                                            small_system):
        K, C_ce = ce_gain(*estimate_system(noisy_batch), small_system.Q, small_system.R)
        V = k_to_v(noisy_cov, K)
        assert V.feasible
        assert cost(noisy_cov, V, small_system.Q, small_system.R).J == pytest.approx(
            C_ce, rel=1e-8
        )
