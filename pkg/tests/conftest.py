"""
Test fixtures shared by the service, schema and CLI tests.
"""
import numpy as np
import pytest

from deepo.schemas.data import CovarianceState, DataBatch
from deepo.schemas.policy import PolicyV
from deepo.schemas.system import LinearSystem
from deepo.services.covariance_lqr import k_to_v
from deepo.services.data_engine import build_covariances, random_batch
from deepo.services.lqr_model import benchmark_laplacian, random_system, reference_system
from deepo.utils.random import make_rng


@pytest.fixture
def reference() -> LinearSystem:
    """The 4-state, 2-input open-loop stable plant."""
    return reference_system()


@pytest.fixture
def laplacian() -> LinearSystem:
    """Marginally unstable 3-state benchmark with Q = R = I."""
    return benchmark_laplacian()


@pytest.fixture
def small_system() -> LinearSystem:
    """
    Random 4-state, 2-input plant with rho(A) in [0.5, 0.8].

    Returns:
        LinearSystem: A fixed draw (seed 3)
    """
    return random_system(4, 2, 3, rho_band=(0.5, 0.8))


@pytest.fixture
def noisy_batch(small_system: LinearSystem) -> DataBatch:
    """20 independent columns with noise of scale 0.01."""
    return random_batch(small_system, 20, make_rng(11, "fixture"), noise_scale=0.01)


@pytest.fixture
def noisy_cov(noisy_batch: DataBatch) -> CovarianceState:
    return build_covariances(noisy_batch)


@pytest.fixture
def feasible_policy(noisy_cov: CovarianceState) -> PolicyV:
    """
    V = Phi^{-1}[0; I], feasible because X1_bar V stays close to the stable A.
    """
    policy = k_to_v(noisy_cov, np.zeros((noisy_cov.m, noisy_cov.n)))
    assert policy.feasible
    return policy
