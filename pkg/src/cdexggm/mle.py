"""Exact maximum-likelihood estimation for small graphs.

The joint log-likelihood of n independent centered Gaussian observations
with precision K(x_m) is maximized by cyclic coordinate updates: each packed
parameter receives a damped Newton-style increment built from traces of the
current model covariance, and the per-observation covariances are refreshed
after every accepted step.  Observations sharing a covariate row share one
inverse, so designs with few distinct covariate levels are cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import ConvergenceError, NotPositiveDefiniteError, SingularMatrixError
from .model import (CovariateDesign, Dataset, ParameterVector, PrecisionBasis, pack,
                    packed_indices, unpack)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MleFitResult:
    """Outcome of :func:`fit_mle`.

    ``loglik_trace`` holds the log-likelihood before the first sweep and
    after each sweep; it is non-decreasing because every coordinate step is
    accepted only if the likelihood does not drop.
    """

    estimate: PrecisionBasis
    loglik_trace: tuple[float, ...]
    converged: bool
    sweeps: int
    asymptotic_cov: np.ndarray | None
    max_abs_score: float


class _Groups:
    """Observations grouped by identical covariate rows.

    Holds per-group counts, covariate rows, second-moment matrices
    S_g = sum_{m in g} y_m y_m^T, and the data moments
    A_h = sum_m x_m^(h) y_m y_m^T (A_0 uses coefficient 1).
    """

    def __init__(self, data: Dataset):
        x = data.design.values
        y = data.y
        n, p = y.shape
        if x.shape[1] == 0:
            rows = np.zeros((1, 0))
            inverse = np.zeros(n, dtype=int)
        else:
            rows, inverse = np.unique(x, axis=0, return_inverse=True)
            inverse = inverse.reshape(-1)
        n_groups = rows.shape[0]
        counts = np.bincount(inverse, minlength=n_groups).astype(float)
        second = np.zeros((n_groups, p, p))
        first_index = np.full(n_groups, -1, dtype=int)
        for g in range(n_groups):
            mask = inverse == g
            yg = y[mask]
            second[g] = yg.T @ yg
            first_index[g] = int(np.nonzero(mask)[0][0])
        n_cov = x.shape[1]
        coef = np.ones((n_cov + 1, n_groups))
        coef[1:] = rows.T
        moments = np.einsum("hg,gij->hij", coef, second)
        self.rows = rows
        self.counts = counts
        self.second = second
        self.coef = coef
        self.moments = moments
        self.first_index = first_index
        self.n = n
        self.p = p
        self.n_covariates = n_cov


def _design_groups(design: CovariateDesign):
    """Unique covariate rows with multiplicities (design-only grouping)."""
    x = design.values
    if x.shape[1] == 0:
        return np.zeros((1, 0)), np.array([float(design.n)])
    rows, counts = np.unique(x, axis=0, return_counts=True)
    return rows, counts.astype(float)


def _stack_precisions(basis: PrecisionBasis, rows: np.ndarray) -> np.ndarray:
    k = np.broadcast_to(basis.q0, (rows.shape[0],) + basis.q0.shape).copy()
    for h, slope in enumerate(basis.slopes):
        k += rows[:, h][:, None, None] * slope
    return k


def _cholesky_logdets(k_stack: np.ndarray, first_index: np.ndarray) -> np.ndarray:
    """Log-determinants via Cholesky; raises naming the first offending
    observation if some precision is not positive definite."""
    sign, logdet = np.linalg.slogdet(k_stack)
    bad = np.nonzero(~((sign > 0) & np.isfinite(logdet)))[0]
    if bad.size:
        m = int(first_index[bad[0]])
        raise NotPositiveDefiniteError(
            f"assembled precision at observation {m} is not positive definite", index=m)
    return logdet


def _pack_gradient_block(g: np.ndarray, rows_idx, cols_idx) -> np.ndarray:
    """Extract one packed gradient block: off-diagonal entries count twice."""
    v = g[rows_idx, cols_idx].copy()
    v[rows_idx != cols_idx] *= 2.0
    return v


def joint_log_likelihood(basis: PrecisionBasis, data: Dataset) -> float:
    """Exact Gaussian joint log-likelihood of centered data under ``basis``.

    Computed as -(np/2) log 2pi + 1/2 sum_m log|K_m| - 1/2 sum_m y_m' K_m y_m
    with log-determinants taken from symmetric factorizations.
    """
    groups = _Groups(data)
    k = _stack_precisions(basis, groups.rows)
    logdet = _cholesky_logdets(k, groups.first_index)
    quad = np.einsum("gij,gij->g", k, groups.second)
    return (-0.5 * groups.n * groups.p * _LOG_2PI
            + 0.5 * float(groups.counts @ logdet) - 0.5 * float(quad.sum()))


def _score_from_state(sigma, groups) -> np.ndarray:
    rows_idx, cols_idx = packed_indices(groups.p)
    blocks = []
    for h in range(groups.n_covariates + 1):
        weights = groups.counts * groups.coef[h]
        g = np.tensordot(weights, sigma, axes=1) - groups.moments[h]
        blocks.append(0.5 * _pack_gradient_block(g, rows_idx, cols_idx))
    return np.concatenate(blocks)


def score(beta: ParameterVector, data: Dataset) -> np.ndarray:
    """Gradient of the joint log-likelihood in packed order.

    Implements the closed-form derivatives: each component is half the
    (coefficient-weighted) difference between model and empirical second
    moments, traced against the corresponding indicator matrix.
    """
    basis = unpack(beta)
    groups = _Groups(data)
    k = _stack_precisions(basis, groups.rows)
    _cholesky_logdets(k, groups.first_index)
    sigma = np.linalg.inv(k)
    return _score_from_state(sigma, groups)


def _trace_pair_matrix(sigma: np.ndarray, rows_idx, cols_idx) -> np.ndarray:
    """Matrix of tr(T^u Sigma T^v Sigma) over packed index pairs."""
    base = (sigma[np.ix_(rows_idx, rows_idx)] * sigma[np.ix_(cols_idx, cols_idx)]
            + sigma[np.ix_(rows_idx, cols_idx)] * sigma[np.ix_(cols_idx, rows_idx)])
    g = np.where(rows_idx == cols_idx, 1.0 / math.sqrt(2.0), math.sqrt(2.0))
    return base * np.outer(g, g)


def information_matrix(beta: ParameterVector, design: CovariateDesign) -> np.ndarray:
    """Fisher information of the packed parameters under ``design``.

    Because the log-likelihood is linear in the data second moments, the
    observed and expected information coincide; entries are assembled from
    the closed-form second derivatives, block (h1, h2) carrying the
    covariate products x^(h1) x^(h2).
    """
    basis = unpack(beta)
    if design.n_covariates != basis.n_covariates:
        raise ValueError("design and parameter vector disagree on the covariate count")
    rows, counts = _design_groups(design)
    k = _stack_precisions(basis, rows)
    sign, _ = np.linalg.slogdet(k)
    if not np.all(sign > 0):
        g = int(np.nonzero(sign <= 0)[0][0])
        raise NotPositiveDefiniteError(
            f"assembled precision at covariate row {rows[g]} is not positive definite")
    sigma = np.linalg.inv(k)
    rows_idx, cols_idx = packed_indices(basis.p)
    d = len(beta)
    info = np.zeros((d, d))
    for g in range(rows.shape[0]):
        xg = np.concatenate(([1.0], rows[g]))
        m = _trace_pair_matrix(sigma[g], rows_idx, cols_idx)
        info += 0.5 * counts[g] * np.kron(np.outer(xg, xg), m)
    return info


def _projection_init(groups: _Groups) -> PrecisionBasis | None:
    """Data-driven starting point: invert each covariate group's sample
    covariance and project the inverses onto the linear-in-covariates model
    by entrywise weighted least squares.

    Returns ``None`` when groups are too small to invert, the design is not
    identified, or the projected basis fails validity; the caller then falls
    back to the identity basis.  The coordinate updates are heavily damped
    far from the optimum (their denominators carry the squared gradient), so
    a consistent starting point matters at large n.
    """
    p = groups.p
    n_cov = groups.n_covariates
    if groups.rows.shape[0] < n_cov + 1 or np.any(groups.counts <= p + 1):
        return None
    try:
        targets = np.linalg.inv(groups.second / groups.counts[:, None, None])
    except np.linalg.LinAlgError:
        return None
    x_rows = np.concatenate([np.ones((groups.rows.shape[0], 1)), groups.rows], axis=1)
    weighted = groups.counts[:, None] * x_rows
    normal = x_rows.T @ weighted
    rhs = np.tensordot(weighted.T, targets, axes=1).reshape(n_cov + 1, -1)
    try:
        coeffs = np.linalg.solve(normal, rhs).reshape(n_cov + 1, p, p)
    except np.linalg.LinAlgError:
        return None
    coeffs = 0.5 * (coeffs + np.transpose(coeffs, (0, 2, 1)))
    try:
        basis = PrecisionBasis(coeffs[0], tuple(coeffs[1:]))
    except ValueError:
        return None
    if not basis.is_valid():
        return None
    return basis


def _invert_information(info: np.ndarray) -> np.ndarray:
    try:
        factor = sla.cho_factor(info, check_finite=False)
        cov = sla.cho_solve(factor, np.eye(info.shape[0]), check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(
            "information matrix is singular; the model is not identified at this "
            "design -- consider the penalized composite-likelihood path") from exc
    return 0.5 * (cov + cov.T)


def asymptotic_covariance(fit: MleFitResult, design: CovariateDesign) -> np.ndarray:
    """Estimated covariance of the packed MLE: inverse information at the fit."""
    if not fit.converged:
        raise ValueError("asymptotic covariance requires a converged fit")
    info = information_matrix(pack(fit.estimate), design)
    return _invert_information(info)


def fit_mle(data: Dataset, init: PrecisionBasis | None = None, tol: float = 1e-6,
            max_sweeps: int = 500, grad_tol: float | None = None,
            compute_cov: bool = True) -> MleFitResult:
    """Maximize the joint log-likelihood by cyclic coordinate updates.

    Each sweep visits every baseline parameter and then every slope block in
    packed order.  A coordinate increment is the closed-form damped step
    (gradient over curvature-plus-squared-gradient/2); it is halved up to 20
    times until the likelihood does not decrease, and the per-group model
    covariances are refreshed after each accepted step.  Convergence:
    the largest absolute accepted step in a sweep falls below ``tol`` (and,
    when ``grad_tol`` is given, the score is below it in absolute value).

    Parameters
    ----------
    data : Dataset
    init : PrecisionBasis, optional
        Starting point; must be valid (positive definite endpoints).  By
        default, a weighted least-squares projection of the per-group
        inverse sample covariances (identity basis when that is unavailable
        or invalid).
    tol : float
        Sweep-level threshold on the largest coordinate change.
    max_sweeps : int
        Sweep budget.
    grad_tol : float, optional
        Extra stopping requirement on the score's max absolute component.
    compute_cov : bool
        Attach the inverse information at the estimate to the result.
    """
    p, n_cov = data.p, data.design.n_covariates
    if data.n < 2:
        raise ValueError("maximum-likelihood fitting needs at least 2 observations")
    groups = _Groups(data)
    if init is None:
        init = _projection_init(groups) or PrecisionBasis.identity(p, n_cov)
    if init.p != p or init.n_covariates != n_cov:
        raise ValueError("initial basis dimensions do not match the data")
    if not init.is_valid():
        raise ValueError("initial basis is not valid: baseline and endpoint matrices "
                         "must be positive definite")
    mats = [m.copy() for m in init.matrices()]
    k = _stack_precisions(init, groups.rows)
    logdet = _cholesky_logdets(k, groups.first_index)
    sigma = np.linalg.inv(k)
    quad = np.einsum("gij,gij->g", k, groups.second)
    const = -0.5 * groups.n * p * _LOG_2PI
    loglik = const + 0.5 * float(groups.counts @ logdet) - 0.5 * float(quad.sum())

    rows_idx, cols_idx = packed_indices(p)
    pairs = list(zip(rows_idx.tolist(), cols_idx.tolist()))
    trace = [loglik]
    counts = groups.counts
    converged = False
    sweeps_done = 0

    for sweep in range(1, max_sweeps + 1):
        sweeps_done = sweep
        max_change = 0.0
        for h in range(n_cov + 1):
            w = groups.coef[h]
            for i, j in pairs:
                if i == j:
                    model_tr = float(np.dot(counts * w, sigma[:, j, j]))
                    data_tr = groups.moments[h][j, j]
                    curv = float(np.dot(counts * w * w, sigma[:, j, j] ** 2))
                    s_entry = groups.second[:, j, j]
                else:
                    sii = sigma[:, i, i]
                    sjj = sigma[:, j, j]
                    sij = sigma[:, i, j]
                    model_tr = 2.0 * float(np.dot(counts * w, sij))
                    data_tr = 2.0 * groups.moments[h][i, j]
                    curv = 2.0 * float(np.dot(counts * w * w, sii * sjj + sij ** 2))
                    s_entry = 2.0 * groups.second[:, i, j]
                delta = model_tr - data_tr
                denom = curv + 0.5 * delta * delta
                if denom <= 0.0:
                    continue
                step = delta / denom
                if step == 0.0:
                    continue
                old_upper = k[:, i, j].copy()
                old_lower = k[:, j, i].copy()
                accepted = False
                saw_finite = False
                for _ in range(21):
                    k[:, i, j] = old_upper + step * w
                    if i != j:
                        k[:, j, i] = old_lower + step * w
                    sign, new_logdet = np.linalg.slogdet(k)
                    if np.all(sign > 0) and np.all(np.isfinite(new_logdet)):
                        new_quad = quad + step * w * s_entry
                        new_loglik = (const + 0.5 * float(counts @ new_logdet)
                                      - 0.5 * float(new_quad.sum()))
                        if np.isfinite(new_loglik):
                            saw_finite = True
                            if new_loglik >= loglik:
                                accepted = True
                                break
                    step *= 0.5
                if not accepted:
                    k[:, i, j] = old_upper
                    k[:, j, i] = old_lower
                    if not saw_finite:
                        raise ConvergenceError(
                            "likelihood became non-finite and step halving failed at "
                            f"coordinate (block {h}, entry ({i},{j}))", trace=tuple(trace))
                    continue
                mats[h][i, j] += step
                if i != j:
                    mats[h][j, i] += step
                quad = new_quad
                loglik = new_loglik
                sigma = np.linalg.inv(k)
                max_change = max(max_change, abs(step))
        # refresh accumulated quantities once per sweep to cancel drift
        quad = np.einsum("gij,gij->g", k, groups.second)
        logdet = _cholesky_logdets(k, groups.first_index)
        loglik = const + 0.5 * float(counts @ logdet) - 0.5 * float(quad.sum())
        trace.append(loglik)
        if max_change < tol:
            if grad_tol is None or float(np.max(np.abs(_score_from_state(sigma, groups)))) < grad_tol:
                converged = True
                break

    estimate = PrecisionBasis(mats[0], tuple(mats[1:]))
    max_abs_score = float(np.max(np.abs(_score_from_state(sigma, groups))))
    cov = None
    if compute_cov and converged:
        try:
            cov = _invert_information(information_matrix(pack(estimate), data.design))
        except SingularMatrixError:
            cov = None
    return MleFitResult(estimate=estimate, loglik_trace=tuple(trace), converged=converged,
                        sweeps=sweeps_done, asymptotic_cov=cov, max_abs_score=max_abs_score)
