"""Penalized composite-likelihood estimation for large sparse graphs.

The composite likelihood multiplies, over observations and vertices, the
conditional density of each coordinate given the rest.  Off-diagonal
parameters admit closed-form soft-threshold coordinate updates; diagonal
parameters solve small per-vertex nonlinear systems (Broyden's method, or an
exact closed form when conditional variances do not depend on covariates).

Notation used throughout the module, for observation m and vertex j:

    d_mj = conditional precision  = alpha_jj + sum_h x_m^(h) theta_jj^(h)
    r_mj = (K(x_m) y_m)_j
    o_mj = r_mj - d_mj y_mj       (off-diagonal part of the row product)

so the negative composite log-likelihood is
    sum_mj { -log(d_mj)/2 + r_mj^2 / (2 d_mj) } + (np/2) log 2pi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, NotPositiveDefiniteError, NumericalError
from .model import (Dataset, ParameterVector, PrecisionBasis, pack, packed_indices,
                    unpack)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class BroydenConfig:
    tol: float = 1e-9
    max_iter: int = 100
    init_damping: float = 1.0

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1 or self.init_damping <= 0:
            raise ValueError("Broyden options must be positive")


@dataclass(frozen=True)
class PenaltyConfig:
    """Options for :func:`fit_penalized`.

    ``diagonal_solver`` picks how the per-vertex diagonal systems are
    solved: ``"auto"`` uses the exact closed form whenever it applies
    (constant-diagonal mode, or no covariates) and Broyden otherwise;
    ``"closed_form"`` / ``"broyden"`` force one path, which is mainly useful
    for cross-checking the two.
    """

    lam: float
    constant_diagonal: bool = False
    tol: float = 1e-5
    max_outer_sweeps: int = 200
    broyden: BroydenConfig = field(default_factory=BroydenConfig)
    diagonal_solver: str = "auto"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("penalty level must be nonnegative")
        if self.tol <= 0 or self.max_outer_sweeps < 1:
            raise ValueError("tolerances and sweep budget must be positive")
        if self.diagonal_solver not in ("auto", "closed_form", "broyden"):
            raise ValueError(f"unknown diagonal solver {self.diagonal_solver!r}")


@dataclass(frozen=True)
class CompositeFitResult:
    """Outcome of :func:`fit_penalized`.

    ``active_set`` holds (i, j, h) triples with i < j and h = 0 for the
    baseline matrix, h = 1..H for slopes; exactly the off-diagonal
    coordinates stored as nonzero.  ``objective_trace`` starts at the
    initial objective and appends one value per outer cycle.
    """

    estimate: PrecisionBasis
    objective_trace: tuple[float, ...]
    converged: bool
    active_set: frozenset
    sweeps: int


def soft_threshold(z: float, lam: float) -> float:
    """Proximal map of the absolute value: sign(z) * max(|z| - lam, 0)."""
    if lam < 0:
        raise ValueError("threshold level must be nonnegative")
    mag = abs(z) - lam
    if mag <= 0.0:
        return 0.0
    return math.copysign(mag, z)


class CompositeState:
    """Mutable coordinate-descent state over one dataset and penalty level.

    Keeps the working parameter matrices together with the row products
    r_mj and conditional precisions d_mj, updated incrementally as
    coordinates change; :meth:`refresh` recomputes both from the matrices to
    cancel accumulated drift.
    """

    def __init__(self, data: Dataset, basis: PrecisionBasis, lam: float):
        if basis.p != data.p or basis.n_covariates != data.design.n_covariates:
            raise ValueError("basis dimensions do not match the data")
        if lam < 0:
            raise ValueError("penalty level must be nonnegative")
        self.y = data.y
        self.x = data.design.values
        self.n, self.p = self.y.shape
        self.n_covariates = self.x.shape[1]
        self.lam = float(lam)
        self.mats = [m.copy() for m in basis.matrices()]
        self.y_sq = self.y ** 2
        self.x_sq = self.x ** 2
        self.refresh()

    # -- derived quantities -------------------------------------------------

    def refresh(self) -> None:
        """Recompute r_mj and d_mj from the parameter matrices."""
        r = self.y @ self.mats[0]
        d = np.broadcast_to(np.diagonal(self.mats[0]), (self.n, self.p)).copy()
        for h in range(1, self.n_covariates + 1):
            xh = self.x[:, h - 1][:, None]
            r += xh * (self.y @ self.mats[h])
            d += xh * np.diagonal(self.mats[h])
        self._check_conditional_precisions(d)
        self.row_product = r
        self.cond_precision = d

    @staticmethod
    def _check_conditional_precisions(d: np.ndarray) -> None:
        bad = np.argwhere(~(d > 0.0))
        if bad.size:
            m, j = map(int, bad[0])
            raise NotPositiveDefiniteError(
                f"conditional precision is not positive at observation {m}, vertex {j}",
                index=(m, j))

    def off_diag_part(self, j: int) -> np.ndarray:
        """o_mj for all m: the row product minus its diagonal contribution."""
        return self.row_product[:, j] - self.cond_precision[:, j] * self.y[:, j]

    def diagonal_values(self, j: int) -> np.ndarray:
        """Current (alpha_jj, theta_jj^(1..H)) for vertex j."""
        return np.array([self.mats[h][j, j] for h in range(self.n_covariates + 1)])

    def neg_loglik(self) -> float:
        """Negative composite log-likelihood at the current parameters,
        evaluated from scratch (pure function of the matrices)."""
        r = self.y @ self.mats[0]
        d = np.broadcast_to(np.diagonal(self.mats[0]), (self.n, self.p)).copy()
        for h in range(1, self.n_covariates + 1):
            xh = self.x[:, h - 1][:, None]
            r += xh * (self.y @ self.mats[h])
            d += xh * np.diagonal(self.mats[h])
        self._check_conditional_precisions(d)
        return float(0.5 * (-np.log(d).sum() + (r * r / d).sum())
                     + 0.5 * self.n * self.p * _LOG_2PI)

    def penalty(self) -> float:
        rows, cols = np.triu_indices(self.p, k=1)
        return float(sum(np.abs(m[rows, cols]).sum() for m in self.mats))

    def objective(self) -> float:
        return self.neg_loglik() + self.n * self.lam * self.penalty()

    # -- incremental updates ------------------------------------------------

    def apply_off_diagonal(self, pair: tuple[int, int], h: int, new_value: float) -> float:
        """Set one off-diagonal coordinate, updating row products; returns
        the absolute change."""
        a, b = pair
        old = self.mats[h][a, b]
        delta = new_value - old
        if delta == 0.0:
            return 0.0
        w = 1.0 if h == 0 else self.x[:, h - 1]
        self.row_product[:, a] += delta * w * self.y[:, b]
        self.row_product[:, b] += delta * w * self.y[:, a]
        self.mats[h][a, b] = new_value
        self.mats[h][b, a] = new_value
        return abs(delta)

    def apply_diagonal(self, j: int, new_values: np.ndarray) -> float:
        """Set (alpha_jj, theta_jj^(1..H)) for vertex j; returns the largest
        absolute change."""
        old = self.diagonal_values(j)
        deltas = np.asarray(new_values, dtype=float) - old
        if np.all(deltas == 0.0):
            return 0.0
        shift = np.full(self.n, deltas[0])
        if self.n_covariates:
            shift = shift + self.x @ deltas[1:]
        new_d = self.cond_precision[:, j] + shift
        if not np.all(new_d > 0.0):
            m = int(np.nonzero(~(new_d > 0.0))[0][0])
            raise NotPositiveDefiniteError(
                f"diagonal update would make the conditional precision at observation "
                f"{m}, vertex {j} non-positive", index=(m, j))
        self.cond_precision[:, j] = new_d
        self.row_product[:, j] += shift * self.y[:, j]
        for h in range(self.n_covariates + 1):
            self.mats[h][j, j] = new_values[h]
        return float(np.max(np.abs(deltas)))

    def basis(self) -> PrecisionBasis:
        return PrecisionBasis(self.mats[0], tuple(self.mats[1:]))


# ---------------------------------------------------------------------------
# likelihood pieces
# ---------------------------------------------------------------------------


def conditional_moments(beta: ParameterVector, x_row, j: int, y_row) -> tuple[float, float]:
    """Conditional mean and variance of coordinate j given the others.

    mu = -(1/d) sum_{i != j} K_ji y_i  and  sigma^2 = 1/d  with d the
    conditional precision (the (j,j) entry of the assembled matrix).
    """
    basis = unpack(beta)
    x = np.asarray(x_row, dtype=float).reshape(-1)
    y = np.asarray(y_row, dtype=float).reshape(-1)
    if x.shape[0] != basis.n_covariates or y.shape[0] != basis.p:
        raise ValueError("covariate or response row has the wrong length")
    row = basis.q0[j].copy()
    for xh, slope in zip(x, basis.slopes):
        row += xh * slope[j]
    d = row[j]
    if not d > 0.0:
        raise NotPositiveDefiniteError(
            f"conditional precision at vertex {j} is not positive", index=j)
    mu = -(float(row @ y) - d * y[j]) / d
    return mu, 1.0 / d


def _residual_and_precision(basis: PrecisionBasis, data: Dataset):
    y = data.y
    x = data.design.values
    n, p = y.shape
    r = y @ basis.q0
    d = np.broadcast_to(np.diagonal(basis.q0), (n, p)).copy()
    for h, slope in enumerate(basis.slopes):
        xh = x[:, h][:, None]
        r += xh * (y @ slope)
        d += xh * np.diagonal(slope)
    CompositeState._check_conditional_precisions(d)
    return r, d


def neg_composite_loglik(beta: ParameterVector, data: Dataset) -> float:
    """Negative joint composite log-likelihood.

    The additive constant is fixed at (np/2) log 2pi so values are directly
    comparable with the exact joint likelihood.
    """
    basis = unpack(beta)
    if basis.p != data.p or basis.n_covariates != data.design.n_covariates:
        raise ValueError("parameter dimensions do not match the data")
    r, d = _residual_and_precision(basis, data)
    n, p = data.y.shape
    return float(0.5 * (-np.log(d).sum() + (r * r / d).sum()) + 0.5 * n * p * _LOG_2PI)


def composite_gradient(beta: ParameterVector, data: Dataset) -> np.ndarray:
    """Gradient of the (unpenalized) negative composite log-likelihood,
    packed in the standard layout."""
    basis = unpack(beta)
    y = data.y
    x = data.design.values
    n, p = y.shape
    r, d = _residual_and_precision(basis, data)
    u = r / d
    o = r - d * y
    diag_part = -0.5 / d + 0.5 * y ** 2 - 0.5 * (o * o) / (d * d)
    rows_idx, cols_idx = packed_indices(p)
    diag_mask = rows_idx == cols_idx
    blocks = []
    for h in range(basis.n_covariates + 1):
        uh = u if h == 0 else x[:, h - 1][:, None] * u
        g = uh.T @ y + y.T @ uh
        vec = g[rows_idx, cols_idx]
        gd = diag_part if h == 0 else x[:, h - 1][:, None] * diag_part
        vec[diag_mask] = gd.sum(axis=0)
        blocks.append(vec)
    return np.concatenate(blocks)


def kkt_max_violation(beta: ParameterVector, data: Dataset, lam: float) -> float:
    """Largest violation of the l1 subgradient conditions over all
    off-diagonal coordinates, on the 1/n gradient scale."""
    grad = composite_gradient(beta, data) / data.n
    rows_idx, cols_idx = packed_indices(data.p)
    off_mask = np.tile(rows_idx != cols_idx, unpack(beta).n_covariates + 1)
    values = beta.values[off_mask]
    g = grad[off_mask]
    worst = 0.0
    zero = values == 0.0
    if np.any(zero):
        worst = max(worst, float(np.max(np.abs(g[zero])) - lam))
    if np.any(~zero):
        worst = max(worst, float(np.max(np.abs(g[~zero] + lam * np.sign(values[~zero])))))
    return max(worst, 0.0)


def lambda_max(data: Dataset) -> float:
    """Smallest penalty level that zeroes every off-diagonal coordinate at
    the diagonal-only fit (the pathwise KKT bound)."""
    y = data.y
    x = data.design.values
    n = data.n
    best = 0.0
    c = (2.0 / n) * (y.T @ y)
    np.fill_diagonal(c, 0.0)
    best = max(best, float(np.max(np.abs(c))))
    for h in range(x.shape[1]):
        ch = (2.0 / n) * ((x[:, h][:, None] * y).T @ y)
        ch = 0.5 * (ch + ch.T)
        np.fill_diagonal(ch, 0.0)
        best = max(best, float(np.max(np.abs(ch))))
    return best


# ---------------------------------------------------------------------------
# coordinate updates
# ---------------------------------------------------------------------------


def off_diagonal_update(state: CompositeState, pair: tuple[int, int], h: int = 0) -> float:
    """Exact minimizer of the penalized objective in one off-diagonal
    coordinate, all other parameters held at their current values.

    ``h`` = 0 targets the baseline entry, ``h`` = 1..H the slope of
    covariate h at that vertex pair.
    """
    a, b = pair
    if a == b:
        raise ValueError("off-diagonal updates need two distinct vertices")
    y = state.y
    d = state.cond_precision
    r = state.row_product
    n = state.n
    ta = r[:, a] / d[:, a]
    tb = r[:, b] / d[:, b]
    if h == 0:
        grad = float(ta @ y[:, b] + tb @ y[:, a])
        scale = float((state.y_sq[:, b] / d[:, a]).sum()
                      + (state.y_sq[:, a] / d[:, b]).sum())
    else:
        xh = state.x[:, h - 1]
        grad = float((xh * ta) @ y[:, b] + (xh * tb) @ y[:, a])
        xh2 = state.x_sq[:, h - 1]
        scale = float((xh2 * state.y_sq[:, b] / d[:, a]).sum()
                      + (xh2 * state.y_sq[:, a] / d[:, b]).sum())
    curvature = scale / n
    if not curvature > 0.0:
        raise NumericalError(
            f"degenerate curvature for off-diagonal coordinate ({a},{b}) in block {h}")
    current = state.mats[h][a, b]
    z = current * curvature - grad / n
    return soft_threshold(z, state.lam) / curvature


def diagonal_residuals(beta: ParameterVector, data: Dataset) -> np.ndarray:
    """Partial derivatives of the objective with respect to the diagonal
    parameters, ordered (alpha_11..alpha_pp, then each slope block).

    The l1 penalty excludes diagonals, so these equal the derivatives of the
    negative composite log-likelihood.
    """
    basis = unpack(beta)
    r, d = _residual_and_precision(basis, data)
    y = data.y
    o = r - d * y
    g = -0.5 / d + 0.5 * y ** 2 - 0.5 * (o * o) / (d * d)
    parts = [g.sum(axis=0)]
    for h in range(basis.n_covariates):
        parts.append((data.design.values[:, h][:, None] * g).sum(axis=0))
    return np.concatenate(parts)


def broyden_solve(residual, init, cfg: BroydenConfig | None = None, feasible=None) -> np.ndarray:
    """Solve residual(v) = 0 with the good Broyden rank-one update.

    The Jacobian starts as the diagonal of finite-difference estimates at
    ``init``; each step is backtracked by halving until the trial point is
    feasible (per the optional ``feasible`` predicate) and the residual is
    finite.  Raises :class:`ConvergenceError` with the best iterate when the
    iteration budget runs out.
    """
    cfg = cfg or BroydenConfig()
    v = np.array(init, dtype=float).reshape(-1)
    if feasible is not None and not feasible(v):
        raise ValueError("initial point is infeasible")
    res = np.asarray(residual(v), dtype=float).reshape(-1)
    if not np.all(np.isfinite(res)):
        raise ValueError("residual is not finite at the initial point")
    dim = v.size
    if res.size != dim:
        raise ValueError("residual dimension does not match the unknowns")

    jac = np.eye(dim)
    fd_step = 1e-6 * (1.0 + np.abs(v))
    for k in range(dim):
        trial = v.copy()
        trial[k] += fd_step[k]
        if feasible is not None and not feasible(trial):
            trial[k] = v[k] - fd_step[k]
            if feasible is not None and not feasible(trial):
                continue
        rk = np.asarray(residual(trial), dtype=float).reshape(-1)
        slope = (rk[k] - res[k]) / (trial[k] - v[k])
        if np.isfinite(slope) and slope != 0.0:
            jac[k, k] = slope

    best_v = v.copy()
    best_norm = float(np.max(np.abs(res)))
    for it in range(cfg.max_iter):
        norm = float(np.max(np.abs(res)))
        if norm < best_norm:
            best_norm, best_v = norm, v.copy()
        if norm < cfg.tol:
            return v
        try:
            dv = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            dv = np.linalg.lstsq(jac, -res, rcond=None)[0]
        if it == 0:
            dv = dv * cfg.init_damping
        for _ in range(31):
            trial = v + dv
            if feasible is None or feasible(trial):
                new_res = np.asarray(residual(trial), dtype=float).reshape(-1)
                if np.all(np.isfinite(new_res)):
                    break
            dv = dv * 0.5
        else:
            raise ConvergenceError(
                "Broyden backtracking could not find a feasible finite step",
                best=best_v, residual_norm=best_norm)
        step = trial - v
        res_change = new_res - res
        ssq = float(step @ step)
        if ssq > 0.0:
            jac += np.outer((res_change - jac @ step) / ssq, step)
        v, res = trial, new_res
    norm = float(np.max(np.abs(res)))
    if norm < cfg.tol:
        return v
    if norm < best_norm:
        best_norm, best_v = norm, v
    raise ConvergenceError(
        f"Broyden did not reach tolerance {cfg.tol:g} in {cfg.max_iter} iterations "
        f"(best residual norm {best_norm:.3e})", best=best_v, residual_norm=best_norm)


def update_alpha_diag_constant_variance(j: int, state: CompositeState) -> float:
    """Exact minimizing baseline diagonal for vertex j when conditional
    variances do not depend on covariates (slope diagonals fixed at zero).

    Returns the positive root of the stationarity condition, written in the
    rationalized form (n + sqrt(n^2 + 4 Sy So)) / (2 Sy); when the relevant
    off-diagonal terms vanish (So = 0) this reduces exactly to the limiting
    root n / sum_m y_mj^2.
    """
    o = state.off_diag_part(j)
    ssq_off = float(o @ o)
    ssq_y = float(state.y_sq[:, j].sum())
    if not ssq_y > 0.0:
        raise NumericalError(f"response column {j} has zero sum of squares")
    n = state.n
    return (n + math.sqrt(n * n + 4.0 * ssq_y * ssq_off)) / (2.0 * ssq_y)


def _solve_vertex_diagonal(state: CompositeState, j: int, cfg: PenaltyConfig) -> np.ndarray:
    """Solve the per-vertex diagonal stationarity system, returning the new
    (alpha_jj, theta_jj^(1..H)) values."""
    n_cov = state.n_covariates
    current = state.diagonal_values(j)
    solver = cfg.diagonal_solver
    if solver == "auto":
        solver = "closed_form" if (cfg.constant_diagonal or n_cov == 0) else "broyden"

    if solver == "closed_form":
        if n_cov and not cfg.constant_diagonal:
            raise ValueError("the closed-form diagonal update requires constant-"
                             "diagonal mode when covariates are present")
        new = current.copy()
        new[0] = update_alpha_diag_constant_variance(j, state)
        return new

    o = state.off_diag_part(j)
    o_sq = o * o
    yj_sq = state.y_sq[:, j]
    x = state.x
    restricted = cfg.constant_diagonal

    if restricted:
        def residual(v):
            d = np.full(state.n, v[0])
            g = -0.5 / d + 0.5 * yj_sq - 0.5 * o_sq / (d * d)
            return np.array([g.sum()])

        def feasible(v):
            return v[0] > 0.0

        sol = broyden_solve(residual, current[:1], cfg.broyden, feasible)
        new = current.copy()
        new[0] = sol[0]
        return new

    def residual(v):
        d = v[0] + (x @ v[1:] if n_cov else 0.0)
        g = -0.5 / d + 0.5 * yj_sq - 0.5 * o_sq / (d * d)
        out = np.empty(n_cov + 1)
        out[0] = g.sum()
        if n_cov:
            out[1:] = x.T @ g
        return out

    def feasible(v):
        d = v[0] + (x @ v[1:] if n_cov else 0.0)
        return bool(np.all(d > 0.0))

    return broyden_solve(residual, current, cfg.broyden, feasible)


def fit_penalized(data: Dataset, cfg: PenaltyConfig,
                  init: PrecisionBasis | None = None) -> CompositeFitResult:
    """Minimize the l1-penalized negative composite log-likelihood.

    Each outer cycle runs one full sweep of off-diagonal soft-threshold
    updates (baseline entries in packed order, then each slope block) and
    one diagonal solve over all vertices, then records the objective.
    Stops when the largest parameter change over a cycle drops below
    ``cfg.tol``.  Coordinates zeroed by soft-thresholding are stored as
    exact zeros and reported through ``active_set``.
    """
    p, n_cov = data.p, data.design.n_covariates
    n = data.n
    if n < 2:
        raise ValueError("penalized fitting needs at least 2 observations")
    if init is None:
        ssq = (data.y ** 2).sum(axis=0)
        if np.any(ssq <= 0.0):
            bad = int(np.nonzero(ssq <= 0.0)[0][0])
            raise ValueError(f"response column {bad} has zero variance")
        init = PrecisionBasis(np.diag(n / ssq), tuple(np.zeros((p, p)) for _ in range(n_cov)))
    else:
        if init.p != p or init.n_covariates != n_cov:
            raise ValueError("initial basis dimensions do not match the data")
        if cfg.constant_diagonal and any(np.any(np.diagonal(s) != 0.0) for s in init.slopes):
            raise ValueError("constant-diagonal mode requires zero slope diagonals "
                             "in the initial basis")

    # feasibility (positive conditional precisions at every observed row) is
    # what the composite objective needs; a valid basis always satisfies it,
    # and warm starts from previous fits may be feasible without being valid
    state = CompositeState(data, init, cfg.lam)
    rows_idx, cols_idx = np.triu_indices(p, k=1)
    pairs = list(zip(rows_idx.tolist(), cols_idx.tolist()))
    trace = [state.objective()]
    converged = False
    cycles = 0

    for cycle in range(1, cfg.max_outer_sweeps + 1):
        cycles = cycle
        state.refresh()
        max_change = 0.0
        for h in range(n_cov + 1):
            for pair in pairs:
                new_value = off_diagonal_update(state, pair, h)
                max_change = max(max_change, state.apply_off_diagonal(pair, h, new_value))

        obj_mid = state.objective()
        old_diag = np.array([state.diagonal_values(j) for j in range(p)])
        for j in range(p):
            new_vals = _solve_vertex_diagonal(state, j, cfg)
            max_change = max(max_change, state.apply_diagonal(j, new_vals))
        obj_end = state.objective()
        if obj_end > obj_mid:
            # the diagonal solver is a root finder, not a descent step; damp
            # toward the previous diagonals until the objective is not worse
            target = np.array([state.diagonal_values(j) for j in range(p)])
            damp = 1.0
            for _ in range(30):
                damp *= 0.5
                trial = old_diag + damp * (target - old_diag)
                for j in range(p):
                    state.apply_diagonal(j, trial[j])
                obj_end = state.objective()
                if obj_end <= obj_mid:
                    break
            else:
                for j in range(p):
                    state.apply_diagonal(j, old_diag[j])
                obj_end = state.objective()
        if not np.isfinite(obj_end):
            raise ConvergenceError("objective became non-finite", trace=tuple(trace))
        trace.append(obj_end)
        if max_change < cfg.tol:
            converged = True
            break

    estimate = state.basis()
    active = []
    for h in range(n_cov + 1):
        mat = state.mats[h]
        for a, b in pairs:
            if mat[a, b] != 0.0:
                active.append((a, b, h))
    return CompositeFitResult(estimate=estimate, objective_trace=tuple(trace),
                              converged=converged, active_set=frozenset(active),
                              sweeps=cycles)
