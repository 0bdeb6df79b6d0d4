"""Categorical bipartite stochastic block model for copy-number matrices."""

__version__ = "0.1.0"

from .cavi import (FitConfig, FitReport, NumericalError, compute_elbo, fit, update_cols,
                   update_globals, update_rows)
from .core import (HardAssignments, Priors, VariationalState, block_mode, digamma,
                   dirichlet_kl, expected_log_dirichlet, init_random, map_assignments)
from .data import (BinMeta, CategoricalMatrix, HoldoutSplit, MatrixFormatError,
                   MatrixShapeError, WeightMatrix, encode_copy_numbers, impute_marginal,
                   load_matrix, make_holdout, make_weights, propensity_frequency, write_matrix)
from .decompose import Decomposition, StageConfig, main_matrix, residual, two_stage
from .initialize import init_kmeans, init_spectral, initialize, spectral_embedding
from .metrics import (adjusted_rand_index, empirical_blocks, heldout_accuracy, heldout_loglik,
                      weighted_entropy)
from .refine import (CapacityError, IclScore, RefineResult, icl, icl_penalty, merge_clusters,
                     refine_search, split_cluster)
from .simulate import apply_mcar_mask, sample_block_model, sample_main_residual
from .svi import SviConfig, fit_svi, step_size, svi_step
