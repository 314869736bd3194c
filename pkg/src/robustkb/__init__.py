"""Kalman-Bucy filtering under drift uncertainty described by convex operators."""
from .errors import (BoundViolation, ConfigError, DimensionMismatch, DomainViolation, GridMismatch,
                     MissingKey, NotAdapted, NotPositiveDefinite, NotProper, ParticleDegeneracy,
                     RegressionRankDeficient, RobustKBError, TooManyBlocks, UnknownSubcommand)
from .model import (AmbiguityBound, ModelCoefficients, RunSettings, TimeGrid, load_config,
                    scalar_model, serialize, validate)
from .sim import PathBatch, ThetaPath, density_path, mixture_theta, simulate_paths
from .kalman import classical_filter, discrete_kalman_oracle, riccati_solve
from .gexp import (ConcaveDual, GeneratorSpec, bsde_solve, concave_dual, dual_value, parse_generator,
                   penalty_concavity_check, penalty_eval)
from .robust import (RobustProblem, bias_ode, certify_saddle, decomposition, general_filter,
                     inner_value, robust_filter, upper_value, worst_case_theta)
from .finite import (FiniteConvexOperator, FiniteSpace, Partition, brute_force_mmse, conditional_mmse,
                     rho_eval)

__version__ = "0.1.0"
