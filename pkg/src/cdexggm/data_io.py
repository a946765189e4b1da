"""CSV ingestion and result serialization.

All files are headerless numeric CSV; lines starting with '#' are comments.
Every file this module writes opens with a comment line embedding the run
seed and a digest of the effective configuration, so outputs are
self-describing and byte-reproducible.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .composite import CompositeFitResult
from .errors import DataFormatError
from .inference import partial_correlation
from .mle import MleFitResult
from .model import (CovariateDesign, Dataset, PrecisionBasis, assemble_precision,
                    center_columns, min_max_scale)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float) and value != value:  # nan
        return "nan"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def config_digest(config: dict) -> str:
    """Stable sha256 over the sorted key=value rendering of a config."""
    text = "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(config.items()))
    return hashlib.sha256(text.encode()).hexdigest()


def header_line(seed, digest: str) -> str:
    return f"# cdexggm seed={seed} config=sha256:{digest}"


def read_numeric_csv(path) -> np.ndarray:
    """Parse a headerless numeric CSV; '#' lines and blank lines are skipped.
    Raises :class:`DataFormatError` with the offending line number."""
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            cells = [c.strip() for c in stripped.split(",")]
            try:
                row = [float(c) for c in cells]
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric cell") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataFormatError(
                    f"{path}:{lineno}: ragged row, expected {width} columns, got {len(row)}")
            rows.append(row)
    if not rows:
        raise DataFormatError(f"{path}: contains no data rows")
    return np.array(rows, dtype=float)


def read_dataset(y_path, x_path=None, center: bool = True,
                 scale_bounds=None) -> Dataset:
    """Load responses and covariates from CSV files.

    Responses are column-centered when ``center`` is true.  Covariates pass
    through :func:`min_max_scale` (with optional hypothetical per-column
    bounds); omitting ``x_path`` yields a static model (no covariates).
    """
    y = read_numeric_csv(y_path)
    if center:
        y = center_columns(y)
    if x_path is None:
        design = CovariateDesign(np.zeros((y.shape[0], 0)))
    else:
        raw = read_numeric_csv(x_path)
        if raw.shape[0] != y.shape[0]:
            raise DataFormatError(
                f"row-count mismatch: {y_path} has {y.shape[0]} rows, "
                f"{x_path} has {raw.shape[0]}")
        design = min_max_scale(raw, bounds=scale_bounds)
    return Dataset(y, design)


def _write_lines(path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def write_matrix_csv(path, matrix: np.ndarray, header: str) -> None:
    lines = [header]
    for row in np.atleast_2d(matrix):
        lines.append(",".join(_fmt(v) for v in row))
    _write_lines(path, lines)


def _matrix_names(basis: PrecisionBasis) -> list[str]:
    return ["Q0"] + [f"P{h}" for h in range(1, basis.n_covariates + 1)]


def write_fit(fit, out_dir, seed, config: dict) -> list[str]:
    """Serialize a fit: one CSV per parameter matrix (17 significant
    digits), a sparsity-pattern table over off-diagonal entries, and a plain
    text report with convergence diagnostics and the config echo.

    Accepts both maximum-likelihood and penalized fits; the report labels
    the trace accordingly.  Returns the written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    digest = config_digest(config)
    head = header_line(seed, digest)
    basis = fit.estimate
    written = []

    for name, matrix in zip(_matrix_names(basis), basis.matrices()):
        path = os.path.join(out_dir, f"{name}.csv")
        write_matrix_csv(path, matrix, head)
        written.append(path)

    rows_idx, cols_idx = np.triu_indices(basis.p, k=1)
    pattern_lines = [head, "# matrix,i,j,nonzero"]
    for name, matrix in zip(_matrix_names(basis), basis.matrices()):
        for a, b in zip(rows_idx.tolist(), cols_idx.tolist()):
            flag = 1 if matrix[a, b] != 0.0 else 0
            pattern_lines.append(f"{name},{a},{b},{flag}")
    pattern_path = os.path.join(out_dir, "sparsity_pattern.csv")
    _write_lines(pattern_path, pattern_lines)
    written.append(pattern_path)

    if isinstance(fit, MleFitResult):
        kind, trace_name, trace = "mle", "loglik_trace", fit.loglik_trace
    elif isinstance(fit, CompositeFitResult):
        kind, trace_name, trace = "penalized", "objective_trace", fit.objective_trace
    else:
        raise TypeError(f"unsupported fit type {type(fit).__name__}")
    active = sum(1 for m in basis.matrices()
                 for a, b in zip(rows_idx, cols_idx) if m[a, b] != 0.0)
    report = [head,
              f"kind={kind}",
              f"converged={_fmt(fit.converged)}",
              f"sweeps={fit.sweeps}",
              f"active_set_size={active}",
              f"{trace_name}={','.join(_fmt(v) for v in trace)}",
              f"seed={seed}"]
    report.extend(f"config.{k}={_fmt(v)}" for k, v in sorted(config.items()))
    report_path = os.path.join(out_dir, "fit_report.txt")
    _write_lines(report_path, report)
    written.append(report_path)

    if isinstance(fit, MleFitResult) and fit.asymptotic_cov is not None:
        cov_path = os.path.join(out_dir, "asymptotic_cov.csv")
        write_matrix_csv(cov_path, fit.asymptotic_cov, head)
        written.append(cov_path)
    return written


def _edge_evaluation_rows(n_covariates: int) -> list[np.ndarray]:
    """Covariate rows at which plot-ready edge weights are evaluated: the
    baseline plus each covariate alone at 0.25, 0.5, 0.75, 1."""
    rows = [np.zeros(n_covariates)]
    for h in range(n_covariates):
        for level in (0.25, 0.5, 0.75, 1.0):
            row = np.zeros(n_covariates)
            row[h] = level
            rows.append(row)
    return rows


def write_edges_long(basis: PrecisionBasis, out_dir, seed, config: dict) -> str:
    """Plot-ready long-format table: one row per (covariate row, edge) with
    the assembled precision entry and the implied partial correlation."""
    os.makedirs(out_dir, exist_ok=True)
    digest = config_digest(config)
    lines = [header_line(seed, digest), "# covariates,i,j,weight,partial_corr"]
    rows_idx, cols_idx = np.triu_indices(basis.p, k=1)
    for x_row in _edge_evaluation_rows(basis.n_covariates):
        k = assemble_precision(basis, x_row)
        label = ";".join(f"x{h + 1}={_fmt(v)}" for h, v in enumerate(x_row))
        for a, b in zip(rows_idx.tolist(), cols_idx.tolist()):
            rho = partial_correlation(k, a, b) if k[a, a] > 0 and k[b, b] > 0 else float("nan")
            lines.append(f"{label},{a},{b},{_fmt(k[a, b])},{_fmt(rho)}")
    path = os.path.join(out_dir, "edges_long.csv")
    _write_lines(path, lines)
    return path


def read_fit_dir(fit_dir):
    """Load the matrices (and covariance, when present) written by
    :func:`write_fit`; returns (basis, asymptotic_cov_or_None)."""
    q0_path = os.path.join(fit_dir, "Q0.csv")
    if not os.path.exists(q0_path):
        raise DataFormatError(f"{fit_dir}: no Q0.csv; not a fit directory")
    q0 = read_numeric_csv(q0_path)
    slopes = []
    h = 1
    while True:
        path = os.path.join(fit_dir, f"P{h}.csv")
        if not os.path.exists(path):
            break
        slopes.append(read_numeric_csv(path))
        h += 1
    basis = PrecisionBasis(q0, tuple(slopes))
    cov_path = os.path.join(fit_dir, "asymptotic_cov.csv")
    cov = read_numeric_csv(cov_path) if os.path.exists(cov_path) else None
    return basis, cov


def write_table_csv(path, columns: list[str], rows: list[dict], header: str) -> None:
    """Write dict rows under a fixed column order; missing keys are blank."""
    lines = [header, "# " + ",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(col)) for col in columns))
    _write_lines(path, lines)
