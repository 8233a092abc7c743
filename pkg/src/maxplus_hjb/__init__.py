"""Monotone probabilistic max-plus solver for fully nonlinear parabolic
Hamilton-Jacobi-Bellman equations.

The scheme weights simulated Brownian increments with a degree-(4k+2)
polynomial whose expectation reproduces the contracted Hessian term while
keeping every one-step weight nonnegative, and propagates the value
function backward as a finite supremum of quadratic forms selected and
refitted at simulated states.
"""

from .errors import ConfigurationError, NumericalError, UsageError
from .hjb_problem import (LQControl, MaxPlusValueFunction, ModeCoefficients,
                          ProblemSpec, QuadraticForm, approximate_scalar_payoff,
                          dump_value_function, eval_quad, lift_payoff,
                          scalar_call_spread, sup_eval)
from .monotone_poly import (MonotonePolynomial, build as build_monotone_poly,
                            eval_P, min_k_for_monotonicity, normal_even_moment,
                            one_step_weight, probe_monotone_step)
from .factorization import (GeneratorChoice, ResidualFactor,
                            build_uncertain_correlation_generator,
                            cholesky_drop_zero_columns, residual_matrix)
from .simulation import (SamplePaths, brownian_increments, dump_paths,
                         initial_sampler_point, initial_sampler_uniform,
                         simulate, uniform_subsample)
from .scheme_ops import (DerivativeEstimates, apply_G, apply_T,
                         discrete_increment_operator_1d,
                         discrete_increment_weights_2d, estimate_derivatives,
                         gauss_hermite_increments, lq_maximize)
from .maxplus_solver import (RegressionDesign, SolveReport, SolverConfig,
                             backward_solve, coefficients_to_form,
                             form_coefficients, quad_basis_size, quad_features,
                             regress_G_image, select_optimal_forms, value_eval)
from .benchmarks import (ExperimentConfig, build_block_correlation_modes,
                         build_correlation_modes, lower_bound_dim5,
                         make_uncertain_correlation_problem,
                         oracle_singleton_price, pair_configs_dim5,
                         run_experiment, stability_scan, tensor_gh_spread_price,
                         terminal_family, write_oracle_file)

__version__ = "0.1.0"
