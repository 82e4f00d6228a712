"""Bayesian CP tensor factorization with sparse side information.

Gibbs sampling of a CP model whose latent vectors have a side-information
regression prior; the link matrix is drawn by solving noise-perturbed ridge
normal equations with matrix-free conjugate gradient.
"""

__version__ = "0.1.0"

from .errors import BayesTFError, ContractError, ConvergenceError, FormatError, NumericalError
from .sparse import SparseMatrix, CgSettings, spmv, spmv_t, apply_K, cg_solve_multi
from .model import (
    ObservationSet,
    ModeData,
    ModeState,
    HyperPriorConfig,
    SamplerState,
    predict_entry,
    latent_conditional,
    sample_mode_hyperparams,
    sample_alpha,
    sample_lambda_beta,
)
from .sampler import SamplerConfig, PosteriorSummary, sample_link_matrix, run_sampler
from .analysis import (
    normalized_measurement_latents,
    select_divergent_dims,
    interaction_difference,
    rank_proteins,
    pair_type_discrimination,
    rmse,
)
from .synthetic import GenSpec, gen_synthetic, split_cells
from .io import load_tensor, load_side_info, write_tensor, write_side_info, load_manifest
