"""Core model types and shared operations.

The model family: a p-variate Gaussian whose precision matrix depends on a
row of covariates x in [0,1]^H through

    K(x) = Q0 + sum_h x_h * P_h,

where ``Q0`` is the baseline precision and each slope matrix ``P_h``
describes how the precision shifts per unit of covariate h.  Equivalently
K(x) is a convex-style combination of ``Q0`` and the endpoint matrices
``Q_h = P_h + Q0 / H``; when all of those are positive definite, K(x) is
positive definite for every covariate row in the unit cube.

All matrix-valued types store only the upper triangle internally and mirror
it on construction, so stored matrices are exactly symmetric by
construction.  Every type is immutable after construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


# ---------------------------------------------------------------------------
# packed parameter layout
#
# The flat parameter vector stacks (H+1) blocks of length p(p+1)/2:
# first the baseline block (entries of Q0), then one block per covariate
# (entries of P_h, h = 1..H).  Within a block, entries follow row-major
# upper-triangular order including the diagonal:
# (0,0), (0,1), ..., (0,p-1), (1,1), ..., (p-1,p-1).
# This ordering is part of the public contract and is stable across releases.
# ---------------------------------------------------------------------------


def packed_indices(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of one packed block, in layout order."""
    return np.triu_indices(p)


def packed_block_length(p: int) -> int:
    return p * (p + 1) // 2


def packed_length(p: int, n_covariates: int) -> int:
    """Total parameter count: (H+1) * p(p+1)/2."""
    return (n_covariates + 1) * packed_block_length(p)


def coordinate_index(p: int, i: int, j: int, h: int = 0) -> int:
    """Flat index of matrix entry (i, j) in block h (0 = baseline).

    ``i`` and ``j`` are 0-based vertex indices in either order.
    """
    if not (0 <= i < p and 0 <= j < p):
        raise ValueError(f"vertex pair ({i}, {j}) out of range for p={p}")
    if i > j:
        i, j = j, i
    # offset of row i within the upper triangle, then the column offset
    within = i * p - i * (i - 1) // 2 + (j - i)
    return h * packed_block_length(p) + within


def _mirror_upper(m: np.ndarray) -> np.ndarray:
    """Return a symmetric copy built from the upper triangle of ``m``."""
    out = np.triu(m)
    out = out + np.triu(m, 1).T
    return out


def _frozen_array(a, dtype=float, ndim=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-dimensional array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CovariateDesign:
    """Fixed covariate design: n rows, H columns, every entry in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        vals = _frozen_array(self.values, ndim=2)
        if vals.shape[0] < 1:
            raise ValueError("a covariate design needs at least one row")
        if vals.size and (not np.all(np.isfinite(vals)) or vals.min() < 0.0 or vals.max() > 1.0):
            raise ValueError("covariate values must be finite and lie in [0, 1]; "
                             "scale raw covariates with min_max_scale first")
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PrecisionBasis:
    """Model parameters: baseline precision ``q0`` and slope matrices ``slopes``.

    Constructors keep only the upper triangle of each input matrix and
    mirror it, so stored matrices are exactly symmetric.  A basis is
    *valid* when ``q0`` and every endpoint ``P_h + Q0/H`` are positive
    definite; validity is checked by :meth:`is_valid`, never assumed.
    """

    q0: np.ndarray
    slopes: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        q0 = np.asarray(self.q0, dtype=float)
        if q0.ndim != 2 or q0.shape[0] != q0.shape[1]:
            raise ValueError(f"baseline matrix must be square, got shape {q0.shape}")
        mats = [q0] + [np.asarray(s, dtype=float) for s in self.slopes]
        p = q0.shape[0]
        for k, m in enumerate(mats):
            if m.shape != (p, p):
                raise ValueError(f"matrix {k} has shape {m.shape}, expected ({p}, {p})")
            if not np.allclose(m, m.T, rtol=1e-8, atol=1e-8, equal_nan=True):
                raise ValueError(f"matrix {k} is not symmetric")
        mirrored = [_frozen_array(_mirror_upper(m)) for m in mats]
        object.__setattr__(self, "q0", mirrored[0])
        object.__setattr__(self, "slopes", tuple(mirrored[1:]))

    @property
    def p(self) -> int:
        return self.q0.shape[0]

    @property
    def n_covariates(self) -> int:
        return len(self.slopes)

    def endpoint(self, h: int) -> np.ndarray:
        """Precision at the unit value of covariate ``h`` (1-based), all
        others zero: ``P_h + Q0 / H``."""
        if not 1 <= h <= self.n_covariates:
            raise ValueError(f"covariate index {h} out of range 1..{self.n_covariates}")
        return self.slopes[h - 1] + self.q0 / self.n_covariates

    def matrices(self) -> tuple[np.ndarray, ...]:
        return (self.q0,) + self.slopes

    def is_valid(self) -> bool:
        """True iff the baseline and every endpoint matrix are positive
        definite, which guarantees K(x) is positive definite on [0,1]^H."""
        if not is_positive_definite(self.q0):
            return False
        return all(is_positive_definite(self.endpoint(h))
                   for h in range(1, self.n_covariates + 1))

    @classmethod
    def identity(cls, p: int, n_covariates: int) -> "PrecisionBasis":
        """Identity baseline, zero slopes; always valid."""
        return cls(np.eye(p), tuple(np.zeros((p, p)) for _ in range(n_covariates)))


@dataclass(frozen=True)
class ParameterVector:
    """Flat parameter vector over the packed layout (see module docstring)."""

    values: np.ndarray
    p: int
    n_covariates: int

    def __post_init__(self):
        vals = _frozen_array(self.values, ndim=1)
        expected = packed_length(self.p, self.n_covariates)
        if vals.shape[0] != expected:
            raise ValueError(
                f"parameter vector has length {vals.shape[0]}, expected {expected} "
                f"for p={self.p}, H={self.n_covariates}")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.shape[0]

    def block(self, h: int) -> np.ndarray:
        """Packed entries of block ``h`` (0 = baseline, 1..H = slopes)."""
        d = packed_block_length(self.p)
        return self.values[h * d:(h + 1) * d]

    @property
    def alpha(self) -> np.ndarray:
        return self.block(0)

    def theta(self, h: int) -> np.ndarray:
        if not 1 <= h <= self.n_covariates:
            raise ValueError(f"covariate index {h} out of range 1..{self.n_covariates}")
        return self.block(h)


@dataclass(frozen=True)
class Dataset:
    """Centered responses ``y`` (n x p) paired with a covariate design."""

    y: np.ndarray
    design: CovariateDesign

    def __post_init__(self):
        y = _frozen_array(self.y, ndim=2)
        if not np.all(np.isfinite(y)):
            raise ValueError("response matrix contains non-finite values")
        if y.shape[0] != self.design.n:
            raise ValueError(
                f"response matrix has {y.shape[0]} rows but the covariate design has "
                f"{self.design.n}")
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.y.shape[1]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def assemble_precision(basis: PrecisionBasis, covariate_row) -> np.ndarray:
    """Precision matrix at one covariate row: K = Q0 + sum_h x_h P_h.

    Exactly symmetric because the inputs are and the combination is
    entrywise.  Raises ``ValueError`` on a length mismatch.
    """
    x = np.asarray(covariate_row, dtype=float).reshape(-1)
    if x.shape[0] != basis.n_covariates:
        raise ValueError(
            f"covariate row has length {x.shape[0]}, basis expects {basis.n_covariates}")
    k = basis.q0.copy()
    for xh, ph in zip(x, basis.slopes):
        k += xh * ph
    return k


def is_positive_definite(m: np.ndarray, tol_factor: float = 1e-10) -> bool:
    """Check positive definiteness by symmetric (Cholesky-style) elimination.

    Succeeds iff every pivot exceeds ``tol_factor * max(diag(m))``, a
    scale-relative threshold.  Non-finite entries yield ``False``.
    """
    a = np.array(m, dtype=float, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("positive definiteness is defined for square matrices")
    if not np.all(np.isfinite(a)):
        return False
    p = a.shape[0]
    if p == 0:
        return True
    max_diag = float(np.max(np.diagonal(a)))
    if max_diag <= 0.0:
        return False
    tol = tol_factor * max_diag
    for k in range(p):
        pivot = a[k, k]
        if not pivot > tol:
            return False
        row = a[k, k + 1:] / pivot
        a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], row)
    return True


def pack(basis: PrecisionBasis) -> ParameterVector:
    """Flatten a basis into the packed layout (inverse of :func:`unpack`)."""
    rows, cols = packed_indices(basis.p)
    parts = [m[rows, cols] for m in basis.matrices()]
    return ParameterVector(np.concatenate(parts), basis.p, basis.n_covariates)


def unpack(beta, p: int | None = None, n_covariates: int | None = None) -> PrecisionBasis:
    """Rebuild a basis from a packed vector.

    ``beta`` may be a :class:`ParameterVector` (dimensions carried along) or
    a plain 1-d array, in which case ``p`` and ``n_covariates`` are required.
    """
    if isinstance(beta, ParameterVector):
        values, p, n_covariates = beta.values, beta.p, beta.n_covariates
    else:
        if p is None or n_covariates is None:
            raise ValueError("p and n_covariates are required when beta is a raw vector")
        values = np.asarray(beta, dtype=float).reshape(-1)
        if values.shape[0] != packed_length(p, n_covariates):
            raise ValueError(
                f"vector length {values.shape[0]} does not match p={p}, H={n_covariates}")
    rows, cols = packed_indices(p)
    d = packed_block_length(p)
    mats = []
    for h in range(n_covariates + 1):
        m = np.zeros((p, p))
        m[rows, cols] = values[h * d:(h + 1) * d]
        m[cols, rows] = values[h * d:(h + 1) * d]
        mats.append(m)
    return PrecisionBasis(mats[0], tuple(mats[1:]))


def min_max_scale(raw, bounds=None) -> CovariateDesign:
    """Affinely map raw covariate columns into [0, 1].

    Without ``bounds`` each column is mapped by its own extremes.  With
    ``bounds`` (a per-column sequence of ``(min, max)`` pairs) the supplied
    hypothetical extremes are used instead, which makes the map independent
    of the particular sample; raw values outside the supplied bounds raise.
    Columns with zero range map to all zeros (with a warning): the covariate
    is constant, so its effect folds into the baseline matrix.
    """
    x = np.asarray(raw, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"raw covariates must be 2-dimensional, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("raw covariates contain non-finite values")
    n, n_cols = x.shape
    if bounds is not None:
        bounds = list(bounds)
        if len(bounds) != n_cols:
            raise ValueError(f"got {len(bounds)} bounds for {n_cols} columns")
    out = np.zeros_like(x)
    for col in range(n_cols):
        v = x[:, col]
        if bounds is not None:
            lo, hi = map(float, bounds[col])
            if not lo < hi:
                raise ValueError(f"column {col}: bounds ({lo}, {hi}) must satisfy min < max")
            if v.min() < lo or v.max() > hi:
                raise ValueError(
                    f"column {col}: raw values fall outside the supplied bounds ({lo}, {hi})")
        else:
            lo, hi = float(v.min()), float(v.max())
            if lo == hi:
                warnings.warn(
                    f"covariate column {col} has zero range; mapping it to zeros",
                    stacklevel=2)
                out[:, col] = 0.0
                continue
        out[:, col] = (v - lo) / (hi - lo)
    return CovariateDesign(out)


def center_columns(y) -> np.ndarray:
    """Subtract column means; the model assumes centered responses."""
    y = np.asarray(y, dtype=float)
    return y - y.mean(axis=0, keepdims=True)
