"""Monte Carlo laboratory for multidimensional backward SDEs

    y_t = xi + int_t^T g(s, y_s, z_s) ds - int_t^T z_s dB_s

whose generators satisfy only a one-sided Osgood condition in y and a
Lipschitz-plus-sublinear condition in z.  The package provides

  * reproducible Brownian bundles and regression conditional expectations,
  * a constructive solver (data truncation, z-free backward recursion,
    Picard iteration on contraction-sized subintervals),
  * sampled checkers for the structural assumptions on generators,
  * empirical stability sweeps over perturbation families,
  * computable Gronwall / Bihari bound functions.
"""

from .core import (BSDEProblem, ClassDReport, Dimensions, NormEstimates,
                   SolutionField, TerminalSpec, classD_diagnostic, estimate_norms)
from .conditions import (ConditionReport, GeneratorSpec, SamplerConfig,
                         TimeSingularity, check_A_family, check_H1, check_H1a_H1b,
                         check_H2, check_H3, check_H4, perturbation_distance,
                         reevaluate_witness)
from .errors import (BsdeLabError, ConfigurationError, MalformedInputError,
                     NumericContaminationError, RangeOverflowError,
                     SingularIntegrandError, SolverDivergenceError)
from .inequalities import (Modulus, bihari_bound, bihari_transform, divergence_test,
                           gronwall_bound, linear_envelope, modulus_linear,
                           modulus_log1p, modulus_sqrt, modulus_xlog)
from .catalog import (GENERATOR_CATALOG, TERMINAL_CATALOG, make_cubic_decay,
                      make_example1, make_example2, make_linear,
                      make_quadratic_y, make_quadratic_z, make_sine_z,
                      make_sqrt_drift, make_step_y, make_terminal, make_zero)
from .solver import (LadderDiagnostics, PicardTrace, SolveConfig, TruncationLevel,
                     coupled_distances, picard_solve, solve_L1, solve_z_free,
                     truncate_problem)
from .stability import (PerturbationFamily, StabilityReport, run_stability,
                        run_stability_S1M1, stability_metrics)
from .stochastic import (PathBundle, RegressionBasis, TimeGrid,
                         conditional_expectation, load_bundle, prefix_bundle,
                         save_bundle, simulate_paths)

__version__ = "0.1.0"
