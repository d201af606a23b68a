"""
Tests for the dense-matrix kernels.
"""
from unittest.mock import patch

import numpy as np
import pytest
import scipy.linalg

from deepo.core.errors import RankDeficientError, SpectralRadiusError
from deepo.services import numerics
from deepo.services.numerics import (
    eigenbasis,
    nullspace_projector,
    project_nullspace,
    riccati_residual,
    right_pseudoinverse,
    sigma_min,
    solve_dare,
    solve_discrete_lyapunov,
    spectral_radius,
)
from deepo.utils.random import make_rng


def _stable_matrix(rng: np.random.Generator, n: int, rho: float) -> np.ndarray:
    A = rng.standard_normal((n, n))
    return A * (rho / spectral_radius(A))


def _kronecker_oracle(Acl: np.ndarray, W: np.ndarray) -> np.ndarray:
    # Column-major vec: vec(A S A') = kron(A, A) vec(S).
    n = Acl.shape[0]
    vec = np.linalg.solve(np.eye(n * n) - np.kron(Acl, Acl), W.reshape(-1, order="F"))
    return vec.reshape(n, n, order="F")


class TestLyapunov:
    """Test suite for solve_discrete_lyapunov."""

    @pytest.mark.parametrize("method", ["kronecker", "eigen", "doubling"])
    def test_matches_independent_oracle(self, method):
        """Every solver agrees with a direct vectorized solve on stable 4x4 inputs."""
        rng = make_rng(0, "lyapunov")
        for _ in range(10):
            Acl = _stable_matrix(rng, 4, 0.9)
            G = rng.standard_normal((4, 4))
            W = G @ G.T + np.eye(4)

            Sigma = solve_discrete_lyapunov(Acl, W, method=method)

            expected = _kronecker_oracle(Acl, W)
            np.testing.assert_allclose(Sigma, expected, rtol=1e-8, atol=0.0)

    def test_identity_forcing_gives_identity_for_zero_closed_loop(self):
        Sigma = solve_discrete_lyapunov(np.zeros((3, 3)), np.eye(3))
        np.testing.assert_allclose(Sigma, np.eye(3))

    def test_scalar_closed_form(self):
        """sigma = 1 / (1 - a^2) for a scalar system."""
        Sigma = solve_discrete_lyapunov(np.array([[0.5]]), np.array([[1.0]]))
        assert Sigma[0, 0] == pytest.approx(1.0 / 0.75, rel=1e-12)

    def test_auto_uses_the_eigenbasis_for_large_systems(self):
        rng = make_rng(1, "lyapunov")
        Acl = _stable_matrix(rng, 12, 0.8)
        with patch.object(
            numerics, "_lyapunov_doubling", wraps=numerics._lyapunov_doubling
        ) as doubling:
            Sigma = solve_discrete_lyapunov(Acl, np.eye(12))
        doubling.assert_not_called()
        residual = Sigma - np.eye(12) - Acl @ Sigma @ Acl.T
        assert np.linalg.norm(residual) <= 1e-10 * np.linalg.norm(Sigma)

    def test_defective_closed_loop_falls_back_to_doubling(self):
        """A Jordan block has no eigenbasis; the doubling iteration takes over."""
        Acl = np.array([[0.5, 1.0], [0.0, 0.5]])
        W = np.eye(2)
        with patch.object(
            numerics, "_lyapunov_doubling", wraps=numerics._lyapunov_doubling
        ) as doubling:
            Sigma = solve_discrete_lyapunov(Acl, W, method="eigen")
        doubling.assert_called_once()
        np.testing.assert_allclose(Sigma, _kronecker_oracle(Acl, W), rtol=1e-8)

    def test_reused_basis_gives_the_same_solution(self):
        rng = make_rng(5, "lyapunov")
        Acl = _stable_matrix(rng, 10, 0.85)
        basis = eigenbasis(Acl)
        Sigma = solve_discrete_lyapunov(Acl, np.eye(10), method="eigen", basis=basis)
        P = solve_discrete_lyapunov(Acl.T, np.eye(10), method="eigen", basis=basis.transpose())
        np.testing.assert_allclose(Sigma, _kronecker_oracle(Acl, np.eye(10)), rtol=1e-8)
        np.testing.assert_allclose(P, _kronecker_oracle(Acl.T, np.eye(10)), rtol=1e-8)

    def test_unstable_closed_loop_is_rejected(self):
        with pytest.raises(SpectralRadiusError) as excinfo:
            solve_discrete_lyapunov(np.diag([1.0, 0.5]), np.eye(2))
        assert excinfo.value.details["rho"] == pytest.approx(1.0)


class TestRiccati:
    """Test suite for solve_dare."""

    def test_agrees_with_scipy(self, reference):
        P, K = solve_dare(reference.A, reference.B, reference.Q, reference.R)

        expected = scipy.linalg.solve_discrete_are(
            reference.A, reference.B, reference.Q, reference.R
        )
        np.testing.assert_allclose(P, expected, rtol=1e-9)
        assert spectral_radius(reference.A + reference.B @ K) < 1.0

    def test_residual_is_small_on_marginally_unstable_plant(self, laplacian):
        P, _ = solve_dare(laplacian.A, laplacian.B, laplacian.Q, laplacian.R)
        residual = riccati_residual(P, laplacian.A, laplacian.B, laplacian.Q, laplacian.R)
        assert np.max(np.abs(residual)) <= 1e-9 * np.linalg.norm(P)


class TestRankKernels:
    """Test suite for the pseudoinverse, projector and singular value helpers."""

    def test_right_pseudoinverse_is_a_right_inverse(self):
        M = make_rng(2, "pinv").standard_normal((3, 7))
        np.testing.assert_allclose(M @ right_pseudoinverse(M), np.eye(3), atol=1e-10)

    def test_rank_deficient_matrix_is_rejected(self):
        row = make_rng(3, "pinv").standard_normal((1, 5))
        M = np.vstack([row, 2 * row])
        with pytest.raises(RankDeficientError) as excinfo:
            right_pseudoinverse(M)
        assert excinfo.value.sigma_min is not None

    def test_tall_matrix_is_rejected(self):
        with pytest.raises(RankDeficientError):
            right_pseudoinverse(np.ones((4, 2)))

    def test_nullspace_projector_properties(self):
        M = make_rng(4, "projector").standard_normal((2, 6))
        Pi = nullspace_projector(M)

        np.testing.assert_allclose(M @ Pi, 0.0, atol=1e-12)
        np.testing.assert_allclose(Pi @ Pi, Pi, atol=1e-12)
        np.testing.assert_allclose(Pi, Pi.T)
        assert np.trace(Pi) == pytest.approx(4.0)

    def test_cholesky_projection_matches_the_projector(self):
        rng = make_rng(6, "projector")
        M = rng.standard_normal((3, 8))
        G = rng.standard_normal((8, 3))
        np.testing.assert_allclose(
            project_nullspace(M, G), nullspace_projector(M) @ G, atol=1e-12
        )

    def test_cholesky_projection_rejects_rank_deficient_rows(self):
        row = make_rng(7, "projector").standard_normal((1, 5))
        with pytest.raises(RankDeficientError):
            project_nullspace(np.vstack([row, 3 * row]), np.ones((5, 2)))

    def test_eigenbasis_reconstructs_the_matrix(self):
        M = _stable_matrix(make_rng(8, "basis"), 5, 0.9)
        basis = eigenbasis(M)
        rebuilt = basis.vectors @ np.diag(basis.values) @ basis.inverse
        np.testing.assert_allclose(rebuilt.real, M, atol=1e-10)
        assert basis.rho == pytest.approx(0.9)
        flipped = basis.transpose()
        np.testing.assert_allclose(
            (flipped.vectors @ np.diag(flipped.values) @ flipped.inverse).real, M.T, atol=1e-10
        )

    def test_sigma_min_of_diagonal(self):
        assert sigma_min(np.diag([3.0, 0.5, 2.0])) == pytest.approx(0.5)

    def test_spectral_radius_of_rotation(self):
        theta = 0.3
        rotation = 0.7 * np.array(
            [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
        )
        assert spectral_radius(rotation) == pytest.approx(0.7, abs=1e-12)
