"""Block Gibbs sampler with the noise-injection link-matrix update.

Per sweep, for each mode in order: (mu, Lambda) -> beta (and optionally
lambda_beta) -> all latent vectors; the noise precision alpha is drawn last.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ContractError, NumericalError
from .model import (
    HyperPriorConfig,
    ModeData,
    ModeState,
    ObservationSet,
    SamplerState,
    draw_from_conditionals,
    latent_conditionals,
    predict_cells,
    sample_alpha,
    sample_lambda_beta,
    sample_mode_hyperparams,
)
from .rng import Purpose, RngStreams
from .sparse import CgSettings, SparseMatrix, cg_solve_multi, k_operator, spmv_t

__all__ = [
    "SamplerConfig",
    "PosteriorSummary",
    "sample_link_matrix",
    "init_state",
    "gibbs_sweep",
    "run_sampler",
]

log = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    D: int = 30
    burn_in: int = 200
    n_samples: int = 800
    cg: CgSettings = field(default_factory=CgSettings)
    hyper: HyperPriorConfig = field(default_factory=HyperPriorConfig)
    seed: int = 0
    threads: Union[int, str] = 1
    # per-sample latent matrices of every mode (memory: n_samples * sum(N) * D)
    keep_samples: bool = False
    store_test_samples: bool = False
    # when set, the interaction-difference table is accumulated online
    chat_mask: Optional[Sequence[bool]] = None
    chat_slices: tuple = (0, 1)
    mode_order: Optional[Sequence[int]] = None
    warm_start: bool = True

    def __post_init__(self):
        if self.D < 1:
            raise ContractError("D must be >= 1")
        if self.n_samples < 1:
            raise ContractError("n_samples must be >= 1")
        if self.burn_in < 0:
            raise ContractError("burn_in must be >= 0")
        if self.threads != "auto" and int(self.threads) < 1:
            raise ContractError("threads must be a positive integer or 'auto'")

    @property
    def n_threads(self):
        if self.threads == "auto":
            return os.cpu_count() or 1
        return int(self.threads)

    def to_dict(self):
        return {
            "D": self.D,
            "burn_in": self.burn_in,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "threads": self.threads,
            "keep_samples": self.keep_samples,
            "store_test_samples": self.store_test_samples,
            "chat_mask": None if self.chat_mask is None else [bool(b) for b in self.chat_mask],
            "chat_slices": list(self.chat_slices),
            "mode_order": None if self.mode_order is None else list(self.mode_order),
            "warm_start": self.warm_start,
            "cg": {
                "rel_tolerance": self.cg.rel_tolerance,
                "abs_tolerance": self.cg.abs_tolerance,
                "max_iterations": self.cg.max_iterations,
            },
            "hyper": self.hyper.to_dict(),
        }


@dataclass
class PosteriorSummary:
    n_samples: int
    train_pred_mean: np.ndarray
    test_pred_mean: Optional[np.ndarray]
    measurement_latents: np.ndarray  # S x D x N_last (raw latent rows of the last mode)
    norm_products: np.ndarray  # S x D, product over other modes of ||latent row d||
    alpha_trace: np.ndarray
    train_rmse_trace: np.ndarray
    test_rmse_trace: Optional[np.ndarray]
    final_state: SamplerState
    test_pred_samples: Optional[np.ndarray] = None
    latent_samples: Optional[list] = None  # per sample: list of per-mode D x N arrays
    chat_mean: Optional[np.ndarray] = None
    chat_mask: Optional[np.ndarray] = None

    def normalized_measurement_latents(self):
        """S x N_last x D array of ``t_{k,d} * prod ||latent row d||``."""
        return np.swapaxes(self.measurement_latents * self.norm_products[:, :, None], 1, 2)


def sample_link_matrix(X: SparseMatrix, U, Lambda, lambda_beta, cg: CgSettings, rng, x0=None):
    """Draw the D x F link matrix by solving noise-perturbed normal equations.

    Solves ``K B = X^T (U + E1) + sqrt(lambda_beta) E2`` column-wise with
    ``K = X^T X + lambda_beta I`` applied matrix-free, where the rows of E1
    (N x D) and E2 (F x D) are iid ``N(0, Lambda^{-1})``.  The solution is an
    exact draw from ``N(K^{-1} X^T U, Lambda^{-1} kron K^{-1})`` up to the CG
    tolerance.  Returns ``B^T``.

    ``x0`` (D x F, typically the previous draw) only seeds the iteration.
    """
    U = np.asarray(U, dtype=np.float64)
    N, F = X.shape
    D = Lambda.shape[0]
    if U.shape != (N, D):
        raise ContractError(f"U must be {N} x {D}, got {U.shape}")
    if not lambda_beta > 0:
        raise ContractError("lambda_beta must be positive")
    try:
        cov_chol = np.linalg.cholesky(np.linalg.inv(Lambda))
    except np.linalg.LinAlgError:
        raise NumericalError("Lambda is not SPD; cannot factor its inverse") from None
    E1 = rng.standard_normal((N, D)) @ cov_chol.T
    E2 = rng.standard_normal((F, D)) @ cov_chol.T
    rhs = spmv_t(X, U + E1) + np.sqrt(lambda_beta) * E2
    guess = None if x0 is None else np.asarray(x0).T
    B = cg_solve_multi(k_operator(X, lambda_beta), rhs, cg, x0=guess)
    return np.ascontiguousarray(B.T)


def init_state(modes: Sequence[ModeData], config: SamplerConfig, streams: RngStreams) -> SamplerState:
    """Latents iid N(0, 1/D); mu = 0, Lambda = I, beta = 0."""
    D = config.D
    states = []
    for m, md in enumerate(modes):
        gen = streams.generator(Purpose.INIT, m)
        latent = gen.standard_normal((D, md.dim)) / np.sqrt(D)
        beta = None if md.side_info is None else np.zeros((D, md.side_info.ncols))
        states.append(ModeState(latent, np.zeros(D), np.eye(D), beta, config.hyper.lambda_beta))
    alpha = config.hyper.alpha_fixed if config.hyper.alpha_fixed is not None else 1.0
    return SamplerState(states, float(alpha), 0)


def _check_inputs(data: ObservationSet, modes: Sequence[ModeData], config: SamplerConfig):
    if len(modes) != data.n_modes:
        raise ContractError(f"{len(modes)} modes given for a {data.n_modes}-mode tensor")
    for m, md in enumerate(modes):
        if md.dim == 0:
            raise ContractError(f"mode {m} ({md.name or 'unnamed'}) has dimension 0")
        if md.dim != data.mode_dims[m]:
            raise ContractError(
                f"mode {m}: ModeData.dim={md.dim} but tensor dimension is {data.mode_dims[m]}"
            )
    order = config.mode_order
    if order is not None and sorted(order) != list(range(len(modes))):
        raise ContractError("mode_order must be a permutation of the mode indices")


def _update_latents(state, mode, data, md, z, executor, n_chunks):
    precision, linear = latent_conditionals(state, mode, data, side_info=md.side_info)
    N = precision.shape[0]
    if executor is None or n_chunks <= 1 or N < 2 * n_chunks:
        new = draw_from_conditionals(precision, linear, z)
    else:
        bounds = np.linspace(0, N, n_chunks + 1).astype(int)
        parts = executor.map(
            lambda ab: draw_from_conditionals(precision[ab[0]:ab[1]], linear[ab[0]:ab[1]], z[ab[0]:ab[1]]),
            list(zip(bounds[:-1], bounds[1:])),
        )
        new = np.concatenate(list(parts), axis=0)
    state.modes[mode].latent = np.ascontiguousarray(new.T)


def gibbs_sweep(state: SamplerState, data: ObservationSet, modes: Sequence[ModeData],
                config: SamplerConfig, streams: RngStreams, executor=None) -> SamplerState:
    """One full sweep; updates ``state`` in place and returns it."""
    sweep = state.iteration
    hyper = config.hyper
    order = config.mode_order if config.mode_order is not None else range(len(modes))
    for m in order:
        md = modes[m]
        ms = state.modes[m]
        ms.mu, ms.Lambda = sample_mode_hyperparams(ms, md, hyper, streams.generator(Purpose.HYPER, sweep, m))
        if md.side_info is not None:
            U = ms.latent.T - ms.mu[None, :]
            x0 = ms.beta if config.warm_start else None
            ms.beta = sample_link_matrix(md.side_info, U, ms.Lambda, ms.lambda_beta, config.cg,
                                         streams.generator(Purpose.LINK, sweep, m), x0=x0)
            if hyper.lambda_beta_sampled:
                ms.lambda_beta = sample_lambda_beta(ms, hyper, streams.generator(Purpose.LAMBDA_BETA, sweep, m))
        z = streams.entity_normals(Purpose.LATENT, sweep, m, md.dim, state.D)
        _update_latents(state, m, data, md, z, executor, config.n_threads)
    state.alpha = sample_alpha(state, data, hyper, streams.generator(Purpose.ALPHA, sweep))
    state.iteration += 1
    return state


def _rmse(pred, actual):
    if pred.size == 0:
        return np.nan
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


def _norm_products(state: SamplerState):
    prod = np.ones(state.D)
    for ms in state.modes[:-1]:
        prod *= np.linalg.norm(ms.latent, axis=1)
    return prod


def run_sampler(data: ObservationSet, modes: Sequence[ModeData],
                test_cells: Optional[ObservationSet] = None,
                config: SamplerConfig = SamplerConfig(), callback=None) -> PosteriorSummary:
    """Burn in, then collect ``n_samples`` retained sweeps into a summary.

    ``callback(state, sample_index)`` is invoked after every retained sweep
    (``sample_index`` is -1 during burn-in).
    """
    _check_inputs(data, modes, config)
    if test_cells is not None and len(test_cells):
        if test_cells.n_modes != data.n_modes:
            raise ContractError("test cells have a different number of modes")
        test_cells = test_cells.with_mode_dims(data.mode_dims)
        if np.intersect1d(test_cells.cell_keys(), data.cell_keys()).size:
            raise ContractError("test cells overlap training cells")
    has_test = test_cells is not None and len(test_cells) > 0

    streams = RngStreams(config.seed)
    state = init_state(modes, config, streams)
    S = config.n_samples
    D = config.D
    n_last = modes[-1].dim
    train_sum = np.zeros(len(data))
    test_sum = np.zeros(len(test_cells)) if has_test else None
    test_samples = np.zeros((S, len(test_cells))) if has_test and config.store_test_samples else None
    meas = np.zeros((S, D, n_last))
    norms = np.zeros((S, D))
    alphas = np.zeros(S)
    train_rmse = np.zeros(S)
    test_rmse = np.zeros(S) if has_test else None
    latent_samples = [] if config.keep_samples else None
    chat = None
    if config.chat_mask is not None:
        from .analysis import InteractionAccumulator
        chat = InteractionAccumulator(config.chat_mask, *config.chat_slices)

    n_threads = config.n_threads
    executor = ThreadPoolExecutor(n_threads) if n_threads > 1 else None
    try:
        for it in range(config.burn_in + S):
            gibbs_sweep(state, data, modes, config, streams, executor)
            s = it - config.burn_in
            if s < 0:
                if callback is not None:
                    callback(state, -1)
                continue
            pred = predict_cells(state, data.indices)
            train_sum += pred
            train_rmse[s] = _rmse(pred, data.values)
            if has_test:
                tp = predict_cells(state, test_cells.indices)
                test_sum += tp
                test_rmse[s] = _rmse(tp, test_cells.values)
                if test_samples is not None:
                    test_samples[s] = tp
            meas[s] = state.modes[-1].latent
            norms[s] = _norm_products(state)
            alphas[s] = state.alpha
            if latent_samples is not None:
                latent_samples.append([ms.latent.copy() for ms in state.modes])
            if chat is not None:
                chat.add(state)
            if callback is not None:
                callback(state, s)
            if (s + 1) % 100 == 0:
                log.info("sample %d/%d train_rmse=%.4f alpha=%.3f", s + 1, S, train_rmse[s], state.alpha)
    finally:
        if executor is not None:
            executor.shutdown()

    return PosteriorSummary(
        n_samples=S,
        train_pred_mean=train_sum / S,
        test_pred_mean=None if not has_test else test_sum / S,
        measurement_latents=meas,
        norm_products=norms,
        alpha_trace=alphas,
        train_rmse_trace=train_rmse,
        test_rmse_trace=test_rmse,
        final_state=state,
        test_pred_samples=test_samples,
        latent_samples=latent_samples,
        chat_mean=None if chat is None else chat.mean(),
        chat_mask=None if chat is None else chat.mask,
    )
