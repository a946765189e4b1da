"""Shared fixtures and oracle helpers for the test suite."""

import numpy as np
import pytest

import cdexggm as cg


def random_valid_basis(p, n_covariates, seed, c=1.0):
    """Random basis whose baseline and endpoints are positive definite by
    construction (each endpoint comes from an independent A A' + c I draw)."""
    rng = np.random.default_rng(seed)
    endpoints = [cg.pd_from_factor(rng.uniform(-1.0, 1.0, (p, p)), c)
                 for _ in range(n_covariates + 1)]
    q0 = endpoints[0]
    slopes = tuple(endpoints[h] - q0 / n_covariates for h in range(1, n_covariates + 1))
    return cg.PrecisionBasis(q0, slopes)


def finite_diff_gradient(func, values, step=1e-5):
    """Central-difference gradient of a scalar function of a flat vector."""
    values = np.asarray(values, dtype=float)
    grad = np.zeros_like(values)
    for k in range(values.size):
        shift = np.zeros_like(values)
        shift[k] = step
        grad[k] = (func(values + shift) - func(values - shift)) / (2.0 * step)
    return grad


def max_rel_err(approx, exact):
    """Max absolute difference scaled by max(1, largest exact magnitude)."""
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    scale = max(1.0, float(np.max(np.abs(exact))))
    return float(np.max(np.abs(approx - exact))) / scale


@pytest.fixture(scope="session")
def small_mle_setup():
    """A p=3, H=1 dataset with a known valid truth, reused by fast tests."""
    basis = random_valid_basis(3, 1, seed=101)
    design = cg.covariate_design_levels(50, 1)
    data = cg.sample_dataset(basis, design, seed=202)
    return basis, data
