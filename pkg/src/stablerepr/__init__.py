"""Representations for off-policy linear TD(0) and certificates of their stability."""
from .errors import (ConvergenceError, NumericalError, RankDeficiencyError,
                     SingularIterationMatrixError, StableReprError, TrainingBlowUpError,
                     ValidationError)
from .linalg import (RealSchur, Spectrum, WeightedSpace, general_eigenvalues, orthogonalize,
                     projection_operator, real_schur, self_adjoint_eig, spectral_radius,
                     subspace_distance, weighted_inner, weighted_norm, weighted_svd)
from .mdp import (Mdp, PolicyMatrix, Trajectory, build_policy_matrix, compute_value_function,
                  empirical_model, epsilon_greedy, fourroom, fourroom_task,
                  sample_trajectories, stationary_distribution)
from .representations import (CATALOG, Method, Representation, RepresentationFactory,
                              custom_representation, krylov_family, schur_representation,
                              spectral_family, svd_family)
from .stability import (analyze, epsilon_invariance, evaluate_quality, induced_spectrum_check,
                        invariance_stability_bound, is_stable, iteration_matrix,
                        krylov_epsilon, positive_definite_check, stability_report,
                        td_fixed_point)
from .td import Tolerances, TdRunResult, expected_td0, stochastic_td0

__version__ = "0.1.0"
