"""
Small dense-matrix kernels shared by every other service: discrete Lyapunov
and Riccati solvers, spectral radius and eigenbasis, right pseudoinverse and
nullspace projections.

All functions are pure; they read tolerances from ``settings`` unless a
keyword override is given.
"""
from typing import Literal, Optional, Tuple

import numpy as np
import scipy.linalg

from deepo.core.config import settings
from deepo.core.errors import (
    ConvergenceError,
    NotStabilizableError,
    RankDeficientError,
    SpectralRadiusError,
)
from deepo.core.logging import logger
from deepo.schemas.policy import Eigenbasis

LyapunovMethod = Literal["auto", "kronecker", "eigen", "doubling"]


def symmetrize(X: np.ndarray) -> np.ndarray:
    return (X + X.T) / 2


def _require_finite(*matrices: np.ndarray) -> None:
    for M in matrices:
        if not np.all(np.isfinite(M)):
            raise ValueError("matrix entries must be finite")


def spectral_radius(M: np.ndarray) -> float:
    """
    Largest eigenvalue modulus of a square matrix.

    Raises:
        ConvergenceError: If the eigenvalue iteration fails
    """
    M = np.asarray(M, dtype=float)
    _require_finite(M)
    try:
        eigenvalues = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as e:
        raise ConvergenceError(f"eigenvalue iteration failed: {e}") from e
    return float(np.max(np.abs(eigenvalues))) if eigenvalues.size else 0.0


def eigenbasis(M: np.ndarray) -> Eigenbasis:
    """
    Eigenvalues and eigenvectors of a square matrix, with the inverse of the
    eigenvector matrix when it exists.

    Raises:
        ConvergenceError: If the eigenvalue iteration fails
    """
    M = np.asarray(M, dtype=float)
    _require_finite(M)
    try:
        values, vectors = np.linalg.eig(M)
    except np.linalg.LinAlgError as e:
        raise ConvergenceError(f"eigenvalue iteration failed: {e}") from e
    try:
        inverse: Optional[np.ndarray] = np.linalg.inv(vectors)
    except np.linalg.LinAlgError:
        inverse = None
    return Eigenbasis(values=values, vectors=vectors, inverse=inverse)


def _lyapunov_kronecker(Acl: np.ndarray, W: np.ndarray) -> np.ndarray:
    n = Acl.shape[0]
    # Row-major vec: vec(Acl S Acl^T) = kron(Acl, Acl) vec(S).
    lhs = np.eye(n * n) - np.kron(Acl, Acl)
    solution = np.linalg.solve(lhs, W.reshape(-1))
    return solution.reshape(n, n)


def _lyapunov_eigen(basis: Eigenbasis, W: np.ndarray) -> np.ndarray:
    # With Acl = S diag(lam) S^{-1} the equation decouples entrywise in the
    # coordinates C = S^{-1} W S^{-T}.
    S, S_inv, lam = basis.vectors, basis.inverse, basis.values
    C = S_inv @ W @ S_inv.T
    return (S @ (C / (1.0 - np.outer(lam, lam))) @ S.T).real


def _lyapunov_doubling(Acl: np.ndarray, W: np.ndarray, tol: float) -> np.ndarray:
    # Sigma_{k+1} = Sigma_k + A_k Sigma_k A_k^T, A_{k+1} = A_k^2 sums 2^k terms per pass.
    Sigma = W.copy()
    Ak = Acl.copy()
    for _ in range(settings.lyap_doubling_max_iters):
        increment = Ak @ Sigma @ Ak.T
        Sigma = Sigma + increment
        Ak = Ak @ Ak
        scale = max(np.linalg.norm(Sigma), np.finfo(float).tiny)
        if np.linalg.norm(increment) <= 0.1 * tol * scale and np.linalg.norm(Ak) < 1e-3:
            break
    return Sigma


def _lyapunov_residual(Acl: np.ndarray, W: np.ndarray, Sigma: np.ndarray) -> Tuple[float, float]:
    residual = float(np.linalg.norm(Sigma - W - Acl @ Sigma @ Acl.T))
    return residual, float(max(np.linalg.norm(Sigma), np.linalg.norm(W)))


def solve_discrete_lyapunov(
    Acl: np.ndarray,
    W: np.ndarray,
    *,
    method: LyapunovMethod = "auto",
    tol: Optional[float] = None,
    stability_margin: Optional[float] = None,
    rho: Optional[float] = None,
    basis: Optional[Eigenbasis] = None,
) -> np.ndarray:
    """
    Solve Sigma = W + Acl Sigma Acl^T for a Schur-stable Acl.

    Systems up to ``settings.lyap_kron_max_dim`` states use a direct
    Kronecker-vectorized solve. Larger ones are solved in the eigenbasis of
    Acl, and fall back to the squaring (doubling) iteration when Acl is not
    diagonalizable or the eigenbasis solution misses the residual tolerance.

    Args:
        Acl: n x n closed-loop matrix with rho(Acl) < 1 - stability_margin
        W: n x n symmetric forcing term
        method: "kronecker", "eigen", "doubling" or "auto" (switch on n)
        tol: Relative residual tolerance, defaults to settings.lyap_tol
        stability_margin: Defaults to settings.stability_margin
        rho: Known spectral radius of Acl, skips the eigenvalue computation
        basis: Known eigendecomposition of Acl, reused by the eigen method

    Returns:
        np.ndarray: Symmetrized solution Sigma

    Raises:
        SpectralRadiusError: If Acl is not stable enough
        ConvergenceError: If the residual tolerance is not met
    """
    Acl = np.asarray(Acl, dtype=float)
    W = np.asarray(W, dtype=float)
    _require_finite(Acl, W)
    tol = settings.lyap_tol if tol is None else tol
    margin = settings.stability_margin if stability_margin is None else stability_margin

    n = Acl.shape[0]
    if method == "auto":
        method = "kronecker" if n <= settings.lyap_kron_max_dim else "eigen"
    if method == "eigen" and basis is None:
        basis = eigenbasis(Acl)

    if rho is None:
        rho = basis.rho if basis is not None else spectral_radius(Acl)
    if rho >= 1.0 - margin:
        raise SpectralRadiusError(
            f"spectral radius {rho:.6g} violates the stability margin", rho=rho
        )

    Sigma: Optional[np.ndarray] = None
    if method == "kronecker":
        Sigma = symmetrize(_lyapunov_kronecker(Acl, W))
    elif method == "eigen" and basis is not None and basis.diagonalizable:
        Sigma = symmetrize(_lyapunov_eigen(basis, W))
        residual, scale = _lyapunov_residual(Acl, W, Sigma)
        if residual <= tol * scale:
            return Sigma
        logger.debug(f"Eigenbasis Lyapunov residual {residual:.2e}, falling back to doubling")
        Sigma = None
    if Sigma is None:
        method = "doubling"
        Sigma = symmetrize(_lyapunov_doubling(Acl, W, tol))

    residual, scale = _lyapunov_residual(Acl, W, Sigma)
    if residual > tol * scale:
        raise ConvergenceError(
            f"Lyapunov residual {residual:.3e} exceeds {tol:.1e} x {scale:.3e}",
            residual=residual,
            method=method,
        )
    return Sigma


def riccati_residual(
    P: np.ndarray, A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray
) -> np.ndarray:
    BtPA = B.T @ P @ A
    return Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) - P


def solve_dare(
    A: np.ndarray,
    B: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    *,
    tol: Optional[float] = None,
    max_iters: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Solve the discrete algebraic Riccati equation by value iteration

        P <- Q + A'PA - A'PB (R + B'PB)^{-1} B'PA,  starting from P = Q.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (P, K) with K = -(R + B'PB)^{-1} B'PA

    Raises:
        ConvergenceError: If max_iters is exhausted
        NotStabilizableError: If the iterates blow up or the gain does not
            stabilize (A, B)
    """
    A, B, Q, R = (np.asarray(M, dtype=float) for M in (A, B, Q, R))
    _require_finite(A, B, Q, R)
    tol = settings.dare_tol if tol is None else tol
    max_iters = settings.dare_max_iters if max_iters is None else max_iters

    P = symmetrize(Q.copy())
    for iteration in range(max_iters):
        BtPA = B.T @ P @ A
        P_next = symmetrize(
            Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)
        )
        diverged = np.linalg.norm(P_next) > settings.dare_divergence_bound
        if not np.all(np.isfinite(P_next)) or diverged:
            raise NotStabilizableError(
                "Riccati iterates diverged", iterations=iteration
            )
        change = np.linalg.norm(P_next - P)
        P = P_next
        if change <= tol * max(1.0, np.linalg.norm(P)):
            break
    else:
        raise ConvergenceError(
            f"Riccati iteration did not converge in {max_iters} steps",
            change=float(change),
        )

    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    rho = spectral_radius(A + B @ K)
    if rho >= 1.0:
        raise NotStabilizableError(
            f"Riccati gain leaves rho(A+BK) = {rho:.6g}", rho=rho
        )
    logger.debug(f"DARE converged after {iteration + 1} iterations")
    return P, K


def _checked_svd(M: np.ndarray, rank_tol: Optional[float]):
    M = np.asarray(M, dtype=float)
    _require_finite(M)
    p, q = M.shape
    if p > q:
        raise RankDeficientError(
            f"a {p}x{q} matrix cannot have full row rank", sigma_min=0.0
        )
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    rel = settings.rank_tol if rank_tol is None else rank_tol
    threshold = rel * (s[0] if s.size else 0.0)
    sigma_min = float(s[-1]) if s.size else 0.0
    if sigma_min <= threshold or sigma_min == 0.0:
        raise RankDeficientError(
            f"matrix is rank deficient (sigma_min = {sigma_min:.3e})",
            sigma_min=sigma_min,
        )
    return U, s, Vt


def right_pseudoinverse(M: np.ndarray, *, rank_tol: Optional[float] = None) -> np.ndarray:
    """
    Right inverse M^dagger = M^T (M M^T)^{-1} of a full-row-rank p x q matrix.

    Raises:
        RankDeficientError: If sigma_min(M) <= rank_tol * sigma_max(M)
    """
    U, s, Vt = _checked_svd(M, rank_tol)
    return Vt.T @ np.diag(1.0 / s) @ U.T


def nullspace_projector(M: np.ndarray, *, rank_tol: Optional[float] = None) -> np.ndarray:
    """Orthogonal projector I - M^dagger M onto the nullspace of M."""
    _, _, Vt = _checked_svd(M, rank_tol)
    q = Vt.shape[1]
    return symmetrize(np.eye(q) - Vt.T @ Vt)


def project_nullspace(
    M: np.ndarray, G: np.ndarray, *, rank_tol: Optional[float] = None
) -> np.ndarray:
    """
    Project the columns of G onto the nullspace of a full-row-rank M,

        G - M' (M M')^{-1} M G,

    through a Cholesky factorization of M M'. Same result as
    ``nullspace_projector(M) @ G`` without the SVD.

    Raises:
        RankDeficientError: If M M' is not numerically positive definite
    """
    M = np.asarray(M, dtype=float)
    G = np.asarray(G, dtype=float)
    rel = settings.rank_tol if rank_tol is None else rank_tol
    try:
        factor = scipy.linalg.cho_factor(M @ M.T)
    except np.linalg.LinAlgError as e:
        raise RankDeficientError(f"M M' is not positive definite: {e}", sigma_min=0.0) from e
    diagonal = np.abs(np.diag(factor[0]))
    if diagonal.size and diagonal.min() <= rel * diagonal.max():
        raise RankDeficientError(
            "matrix is numerically rank deficient", sigma_min=float(diagonal.min())
        )
    return G - M.T @ scipy.linalg.cho_solve(factor, M @ G)


def sigma_min(M: np.ndarray) -> float:
    """Smallest of the min(p, q) singular values."""
    values = scipy.linalg.svdvals(np.asarray(M, dtype=float))
    return float(values[-1]) if values.size else 0.0


__all__ = [
    "solve_discrete_lyapunov",
    "solve_dare",
    "riccati_residual",
    "spectral_radius",
    "eigenbasis",
    "right_pseudoinverse",
    "nullspace_projector",
    "project_nullspace",
    "sigma_min",
    "symmetrize",
]
