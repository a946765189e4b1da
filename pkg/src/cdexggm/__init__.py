"""Covariate-dependent Gaussian graphical models.

Estimation of precision matrices that vary linearly with observed covariates:
exact maximum likelihood for small graphs, l1-penalized composite likelihood
for large sparse graphs, EBIC model selection, Wald and bootstrap inference,
and a simulation harness.  See the README for the CLI.
"""

from .composite import (BroydenConfig, CompositeFitResult, CompositeState,
                        PenaltyConfig, broyden_solve, composite_gradient,
                        conditional_moments, diagonal_residuals, fit_penalized,
                        kkt_max_violation, lambda_max, neg_composite_loglik,
                        off_diagonal_update, soft_threshold,
                        update_alpha_diag_constant_variance)
from .errors import (BootstrapError, CdexggmError, ConvergenceError, DataFormatError,
                     NotPositiveDefiniteError, NumericalError, SelectionError,
                     SingularMatrixError, StudyError)
from .inference import (EstimatorConfig, TestReport, bootstrap_se, partial_correlation,
                        two_sample_partial_corr_test, wald_joint, wald_single)
from .mle import (MleFitResult, asymptotic_covariance, fit_mle, information_matrix,
                  joint_log_likelihood, score)
from .model import (CovariateDesign, Dataset, ParameterVector, PrecisionBasis,
                    assemble_precision, center_columns, coordinate_index,
                    is_positive_definite, min_max_scale, pack, packed_block_length,
                    packed_indices, packed_length, unpack)
from .selection import (PathPoint, SelectionResult, choose_by_ebic, default_lambda_grid,
                        degrees_of_freedom, ebic, fit_lambda_path, select_lambda)
from .simulation import (MetricReport, SimSpec, StudyResult, chain_precision_from_positions,
                         classification_metrics, covariate_design_levels,
                         covariate_design_uniform, gen_chain_precision,
                         gen_multi_covariate_basis, gen_random_pd, make_truth_basis,
                         pd_from_factor, run_study, sample_dataset)

__version__ = "0.1.0"
