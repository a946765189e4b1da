"""Hypothesis tests on the covariate-dependent network structure.

Wald statistics use the asymptotic normality of the maximum-likelihood
estimator (normal reference for single coordinates, chi-square for joint
nulls).  Standard errors can also be obtained by a nonparametric bootstrap
that resamples observation rows jointly with their covariates, which is what
the two-sample partial-correlation comparison uses.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .composite import PenaltyConfig, fit_penalized
from .errors import BootstrapError, CdexggmError, NumericalError, SingularMatrixError
from .mle import MleFitResult, fit_mle
from .model import CovariateDesign, Dataset, PrecisionBasis, assemble_precision, pack


@dataclass(frozen=True)
class TestReport:
    """One hypothesis test: statistic, reference distribution, p-value."""

    statistic: float
    df: int
    p_value: float
    null_description: str
    se: float | None = None


@dataclass(frozen=True)
class EstimatorConfig:
    """Which estimator refits bootstrap resamples.

    ``kind`` is ``"mle"`` or ``"penalized"``; ``penalty`` configures the
    penalized path, ``tol``/``max_sweeps`` the MLE path.
    """

    kind: str = "mle"
    penalty: PenaltyConfig | None = None
    tol: float = 1e-6
    max_sweeps: int = 500

    def __post_init__(self):
        if self.kind not in ("mle", "penalized"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.kind == "penalized" and self.penalty is None:
            object.__setattr__(self, "penalty", PenaltyConfig(lam=0.05))

    def fit_basis(self, data: Dataset) -> PrecisionBasis:
        if self.kind == "mle":
            return fit_mle(data, tol=self.tol, max_sweeps=self.max_sweeps,
                           compute_cov=False).estimate
        return fit_penalized(data, self.penalty).estimate


def wald_single(fit: MleFitResult, coordinate: int) -> TestReport:
    """Two-sided z-test of one packed parameter against zero."""
    if fit.asymptotic_cov is None:
        raise ValueError("the fit carries no asymptotic covariance")
    cov = fit.asymptotic_cov
    if not 0 <= coordinate < cov.shape[0]:
        raise ValueError(f"coordinate {coordinate} out of range")
    variance = float(cov[coordinate, coordinate])
    if not variance > 0.0:
        raise NumericalError(f"nonpositive variance estimate for coordinate {coordinate}")
    beta = pack(fit.estimate).values
    se = math.sqrt(variance)
    statistic = float(beta[coordinate]) / se
    p_value = 2.0 * float(stats.norm.sf(abs(statistic)))
    return TestReport(statistic=statistic, df=0, p_value=p_value,
                      null_description=f"parameter {coordinate} = 0", se=se)


def wald_joint(fit: MleFitResult, coordinates) -> TestReport:
    """Chi-square test that a set of packed parameters is jointly zero."""
    if fit.asymptotic_cov is None:
        raise ValueError("the fit carries no asymptotic covariance")
    idx = np.asarray(list(coordinates), dtype=int)
    if idx.size == 0:
        raise ValueError("need at least one coordinate")
    beta = pack(fit.estimate).values[idx]
    sub = fit.asymptotic_cov[np.ix_(idx, idx)]
    try:
        solved = np.linalg.solve(sub, beta)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("covariance submatrix is singular") from exc
    statistic = float(beta @ solved)
    p_value = float(stats.chi2.sf(statistic, df=idx.size))
    return TestReport(statistic=statistic, df=int(idx.size), p_value=p_value,
                      null_description=f"{idx.size} parameters jointly 0")


def _bootstrap_replicate(args):
    y, x, seed_seq, estimator = args
    rng = np.random.default_rng(seed_seq)
    idx = rng.integers(0, y.shape[0], size=y.shape[0])
    data = Dataset(y[idx], CovariateDesign(x[idx]))
    return pack(estimator.fit_basis(data)).values


def bootstrap_se(data: Dataset, estimator: EstimatorConfig, coordinates,
                 n_boot: int = 200, seed: int = 0, jobs: int = 1) -> np.ndarray:
    """Nonparametric bootstrap standard errors for packed coordinates.

    Resamples observation rows (responses and covariates jointly) with
    replacement, refits, and returns the per-coordinate sample standard
    deviations over the replicates that fit successfully.  Replicate b draws
    from an RNG stream seeded by (seed, b), so results are reproducible for
    a fixed seed and independent of the parallelism degree.
    """
    if n_boot < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    idx = np.asarray(list(coordinates), dtype=int)
    tasks = [(data.y, data.design.values, [seed, b], estimator) for b in range(n_boot)]
    estimates: list[np.ndarray | None] = [None] * n_boot
    failures = 0
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(_bootstrap_safe, tasks)
            for b, value in enumerate(results):
                estimates[b] = value
    else:
        for b, task in enumerate(tasks):
            estimates[b] = _bootstrap_safe(task)
    kept = [e for e in estimates if e is not None]
    failures = n_boot - len(kept)
    if failures > 0.2 * n_boot:
        raise BootstrapError(
            f"{failures} of {n_boot} bootstrap refits failed",
            n_failed=failures, n_total=n_boot)
    stacked = np.stack(kept)[:, idx]
    return stacked.std(axis=0, ddof=1)


def _bootstrap_safe(task):
    try:
        return _bootstrap_replicate(task)
    except CdexggmError:
        return None


def partial_correlation(k: np.ndarray, i: int, j: int) -> float:
    """Partial correlation of vertices i and j under the precision matrix k:
    -k_ij / sqrt(k_ii k_jj)."""
    if i == j:
        raise ValueError("partial correlation needs two distinct vertices")
    denom = k[i, i] * k[j, j]
    if not denom > 0.0:
        raise NumericalError("precision diagonal must be positive")
    return float(-k[i, j] / math.sqrt(denom))


def _bootstrap_partial_corr_se(data: Dataset, covariate_row, pair,
                               estimator: EstimatorConfig, n_boot: int,
                               seed) -> tuple[float, float]:
    """Point estimate and bootstrap SE of one partial correlation.

    Replicate streams depend only on (seed, replicate), not on which group
    the data belong to, so swapping the two groups of the two-sample test
    exactly negates its statistic.
    """
    i, j = pair
    basis = estimator.fit_basis(data)
    point = partial_correlation(assemble_precision(basis, covariate_row), i, j)
    values = []
    failures = 0
    for b in range(n_boot):
        rng = np.random.default_rng([seed, b])
        idx = rng.integers(0, data.n, size=data.n)
        resampled = Dataset(data.y[idx], CovariateDesign(data.design.values[idx]))
        try:
            refit = estimator.fit_basis(resampled)
            values.append(partial_correlation(
                assemble_precision(refit, covariate_row), i, j))
        except CdexggmError:
            failures += 1
    if failures > 0.2 * n_boot:
        raise BootstrapError(f"{failures} of {n_boot} bootstrap refits failed",
                             n_failed=failures, n_total=n_boot)
    se = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return point, se


def two_sample_partial_corr_test(data_a: Dataset, row_a, data_b: Dataset, row_b,
                                 pair, estimator: EstimatorConfig | None = None,
                                 n_boot: int = 200, seed: int = 0) -> TestReport:
    """Test equality of one partial correlation across two independent groups.

    Each group is fit separately; the partial correlation is read off the
    precision assembled at that group's covariate row, and its standard
    error comes from the nonparametric bootstrap within the group.  The
    statistic (rho_a - rho_b) / sqrt(se_a^2 + se_b^2) is referred to the
    standard normal, two-sided.
    """
    estimator = estimator or EstimatorConfig()
    i, j = pair
    rho_a, se_a = _bootstrap_partial_corr_se(data_a, row_a, pair, estimator,
                                             n_boot, seed)
    rho_b, se_b = _bootstrap_partial_corr_se(data_b, row_b, pair, estimator,
                                             n_boot, seed)
    spread = math.sqrt(se_a * se_a + se_b * se_b)
    diff = rho_a - rho_b
    if spread == 0.0:
        statistic = 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    else:
        statistic = diff / spread
    p_value = 2.0 * float(stats.norm.sf(abs(statistic)))
    return TestReport(statistic=statistic, df=0, p_value=p_value,
                      null_description=f"equal partial correlation of pair ({i},{j}) "
                                       "across the two groups",
                      se=spread)
