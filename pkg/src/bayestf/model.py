"""CP tensor model with side information: data types and full conditionals.

Gaussians follow the precision convention throughout: ``Lambda`` is the
inverse covariance of the latent prior ``c_i ~ N(mu + beta x_i, Lambda^{-1})``
and the link matrix prior is ``vec(beta) ~ N(0, (Lambda kron lambda_beta I)^{-1})``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import stats

from .errors import ContractError, NumericalError
from .sparse import SparseMatrix

__all__ = [
    "ObservationSet",
    "ModeData",
    "ModeState",
    "HyperPriorConfig",
    "SamplerState",
    "predict_entry",
    "predict_cells",
    "other_mode_products",
    "latent_conditional",
    "latent_conditionals",
    "draw_from_conditionals",
    "sample_mode_hyperparams",
    "sample_alpha",
    "sample_lambda_beta",
]

# bound on (cells x D^2) floats materialized at once when accumulating precisions
_CHUNK_FLOATS = 4_000_000


class ObservationSet:
    """Observed cells of a sparse tensor.

    ``indices`` is an (nnz, n_modes) integer array, ``values`` the matching
    reals and ``mode_dims`` the size of every mode.  Duplicate cells are
    rejected.
    """

    def __init__(self, indices, values, mode_dims, check_duplicates=True):
        mode_dims = tuple(int(d) for d in mode_dims)
        if len(mode_dims) < 2:
            raise ContractError("a tensor needs at least 2 modes")
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size == 0:
            indices = indices.reshape(0, len(mode_dims))
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if indices.ndim != 2 or indices.shape[1] != len(mode_dims):
            raise ContractError(f"indices must be (nnz, {len(mode_dims)})")
        if indices.shape[0] != values.shape[0]:
            raise ContractError("indices and values must have the same length")
        if indices.shape[0]:
            if indices.min() < 0 or np.any(indices.max(axis=0) >= np.array(mode_dims)):
                bad = np.flatnonzero(np.any((indices < 0) | (indices >= np.array(mode_dims)), axis=1))[0]
                raise ContractError(
                    f"cell {tuple(indices[bad])} out of range for mode dims {mode_dims}"
                )
        if not np.all(np.isfinite(values)):
            raise ContractError("observed values must be finite")
        self.indices = indices
        self.values = values
        self.mode_dims = mode_dims
        self.indices.setflags(write=False)
        self.values.setflags(write=False)
        if check_duplicates:
            dup = self.find_duplicate()
            if dup is not None:
                raise ContractError(f"duplicate cell {tuple(self.indices[dup])} at entry {dup}")

    @classmethod
    def from_entries(cls, entries, mode_dims=None):
        entries = list(entries)
        if not entries:
            if mode_dims is None:
                raise ContractError("no observations and no mode_dims given")
            return cls(np.zeros((0, len(mode_dims)), dtype=np.int64), [], mode_dims)
        idx = np.array([e[0] for e in entries], dtype=np.int64)
        vals = np.array([e[1] for e in entries], dtype=np.float64)
        if mode_dims is None:
            mode_dims = idx.max(axis=0) + 1
        return cls(idx, vals, mode_dims)

    def find_duplicate(self):
        """Position of the first cell that repeats an earlier one, or None."""
        if len(self) < 2:
            return None
        keys = np.ravel_multi_index(self.indices.T, self.mode_dims)
        _, first = np.unique(keys, return_index=True)
        if first.size == len(self):
            return None
        seen = np.zeros(len(self), dtype=bool)
        seen[first] = True
        return int(np.flatnonzero(~seen)[0])

    def __len__(self):
        return int(self.values.shape[0])

    @property
    def n_modes(self):
        return len(self.mode_dims)

    def subset(self, mask_or_index):
        return ObservationSet(self.indices[mask_or_index], self.values[mask_or_index],
                              self.mode_dims, check_duplicates=False)

    def with_mode_dims(self, mode_dims):
        return ObservationSet(self.indices, self.values, mode_dims, check_duplicates=False)

    def cell_keys(self):
        return np.ravel_multi_index(self.indices.T, self.mode_dims)

    def grouper(self, mode):
        """(N_mode x nnz) 0/1 matrix summing per-cell rows into entities of ``mode``."""
        return self._groupers[mode]

    @cached_property
    def _groupers(self):
        nnz = len(self)
        out = []
        for m, n in enumerate(self.mode_dims):
            out.append(sp.csr_matrix(
                (np.ones(nnz), (self.indices[:, m], np.arange(nnz))), shape=(n, nnz)
            ))
        return out

    def __repr__(self):
        return f"ObservationSet(mode_dims={self.mode_dims}, nnz={len(self)})"


@dataclass
class ModeData:
    dim: int
    side_info: Optional[SparseMatrix] = None
    name: str = ""

    def __post_init__(self):
        if self.side_info is not None and self.side_info.nrows != self.dim:
            raise ContractError(
                f"mode {self.name or '?'}: side info has {self.side_info.nrows} rows, "
                f"expected {self.dim}"
            )

    @property
    def n_features(self):
        return 0 if self.side_info is None else self.side_info.ncols


@dataclass
class ModeState:
    """Latents and prior parameters of one mode.

    ``Lambda`` is a precision matrix: the latent prior is
    ``N(mu + beta x_i, Lambda^{-1})``.
    """

    latent: np.ndarray  # D x N, column i = entity i
    mu: np.ndarray
    Lambda: np.ndarray
    beta: Optional[np.ndarray] = None  # D x F
    lambda_beta: float = 5.0

    @property
    def D(self):
        return self.latent.shape[0]

    def prior_mean(self, side_info=None):
        """D x N matrix of prior means ``mu + beta x_i``."""
        mean = np.repeat(self.mu[:, None], self.latent.shape[1], axis=1)
        if self.beta is not None and side_info is not None:
            mean += side_info.dot_rows(self.beta).T
        return mean

    def copy(self):
        return ModeState(
            self.latent.copy(), self.mu.copy(), self.Lambda.copy(),
            None if self.beta is None else self.beta.copy(), self.lambda_beta,
        )


@dataclass
class HyperPriorConfig:
    """Hyperprior constants.

    ``None`` for ``mu0``, ``nu0`` and ``W0`` means zeros, D and the identity.
    """

    mu0: Optional[Sequence[float]] = None
    kappa0: float = 2.0
    nu0: Optional[float] = None
    W0: Optional[np.ndarray] = None
    alpha_fixed: Optional[float] = None
    alpha_shape: float = 1.0
    alpha_rate: float = 1.0
    lambda_beta: float = 5.0
    lambda_beta_sampled: bool = False
    lambda_beta_shape: float = 1.0
    lambda_beta_rate: float = 1.0

    def __post_init__(self):
        for name in ("kappa0", "alpha_shape", "alpha_rate", "lambda_beta",
                     "lambda_beta_shape", "lambda_beta_rate"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        if self.alpha_fixed is not None and not self.alpha_fixed > 0:
            raise ContractError("alpha_fixed must be positive")
        if self.W0 is not None:
            W0 = np.asarray(self.W0, dtype=float)
            try:
                np.linalg.cholesky(W0)
            except np.linalg.LinAlgError:
                raise ContractError("W0 must be symmetric positive definite") from None
            if not np.allclose(W0, W0.T):
                raise ContractError("W0 must be symmetric positive definite")

    def resolve(self, D):
        """Return ``(mu0, kappa0, nu0, W0)`` for latent dimension D."""
        mu0 = np.zeros(D) if self.mu0 is None else np.asarray(self.mu0, dtype=float)
        nu0 = float(D) if self.nu0 is None else float(self.nu0)
        W0 = np.eye(D) if self.W0 is None else np.asarray(self.W0, dtype=float)
        if mu0.shape != (D,) or W0.shape != (D, D):
            raise ContractError(f"hyperprior dimensions do not match D={D}")
        if nu0 < D:
            raise ContractError(f"nu0 must be >= D ({D})")
        return mu0, self.kappa0, nu0, W0

    def to_dict(self):
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else (list(v) if isinstance(v, tuple) else v)
        return out


@dataclass
class SamplerState:
    modes: list
    alpha: float
    iteration: int = 0

    @property
    def D(self):
        return self.modes[0].D

    def copy(self):
        return SamplerState([m.copy() for m in self.modes], self.alpha, self.iteration)


def predict_entry(state: SamplerState, indices) -> float:
    """CP prediction for one cell: sum over d of the product of per-mode factors."""
    if len(indices) != len(state.modes):
        raise ContractError(f"expected {len(state.modes)} indices, got {len(indices)}")
    prod = np.ones(state.D)
    for m, (ms, i) in enumerate(zip(state.modes, indices)):
        n = ms.latent.shape[1]
        if not 0 <= i < n:
            raise ContractError(f"index {i} out of range for mode {m} (size {n})")
        prod = prod * ms.latent[:, i]
    return float(prod.sum())


def predict_cells(state: SamplerState, indices) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        return np.zeros(0)
    prod = np.ones((indices.shape[0], state.D))
    for m, ms in enumerate(state.modes):
        prod *= ms.latent[:, indices[:, m]].T
    return prod.sum(axis=1)


def other_mode_products(state: SamplerState, data: ObservationSet, mode: int) -> np.ndarray:
    """(nnz, D) elementwise product of the latent vectors of all modes but ``mode``."""
    q = np.ones((len(data), state.D))
    for m, ms in enumerate(state.modes):
        if m != mode:
            q *= ms.latent[:, data.indices[:, m]].T
    return q


def _prior_terms(ms: ModeState, side_info, entity=None):
    if entity is None:
        mean = ms.prior_mean(side_info)
        return ms.Lambda @ mean
    mean = ms.mu.copy()
    if ms.beta is not None and side_info is not None:
        row = side_info.take_rows([entity]).to_dense()[0]
        mean = mean + ms.beta @ row
    return ms.Lambda @ mean


def latent_conditional(state: SamplerState, mode: int, entity: int, data: ObservationSet,
                       side_info: Optional[SparseMatrix] = None):
    """Gaussian full conditional of one entity's latent vector.

    Returns ``(precision, linear_term)``; the conditional is
    ``N(precision^{-1} linear_term, precision^{-1})``.  Only the cells that
    touch ``entity`` are visited.
    """
    ms = state.modes[mode]
    n = ms.latent.shape[1]
    if not 0 <= entity < n:
        raise ContractError(f"entity {entity} out of range for mode {mode} (size {n})")
    cells = np.flatnonzero(data.indices[:, mode] == entity)
    q = np.ones((cells.size, state.D))
    for m, other in enumerate(state.modes):
        if m != mode:
            q *= other.latent[:, data.indices[cells, m]].T
    y = data.values[cells]
    precision = ms.Lambda + state.alpha * (q.T @ q)
    linear = _prior_terms(ms, side_info, entity) + state.alpha * (q.T @ y)
    try:
        np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        raise NumericalError(f"conditional precision of entity {entity} is not SPD") from None
    return precision, linear


def latent_conditionals(state: SamplerState, mode: int, data: ObservationSet,
                        side_info: Optional[SparseMatrix] = None):
    """All entities of ``mode`` at once: ``(N x D x D precisions, N x D linear terms)``."""
    ms = state.modes[mode]
    D = state.D
    N = ms.latent.shape[1]
    q = other_mode_products(state, data, mode)
    G = data.grouper(mode)
    linear = _prior_terms(ms, side_info).T + state.alpha * np.asarray(G @ (q * data.values[:, None]))
    scatter = np.zeros((N, D * D))
    step = max(1, _CHUNK_FLOATS // (D * D))
    for start in range(0, len(data), step):
        qc = q[start:start + step]
        outer = (qc[:, :, None] * qc[:, None, :]).reshape(qc.shape[0], D * D)
        scatter += G[:, start:start + step] @ outer
    precision = ms.Lambda[None, :, :] + state.alpha * scatter.reshape(N, D, D)
    return precision, linear


def draw_from_conditionals(precision, linear, z):
    """Draw ``x_n ~ N(P_n^{-1} b_n, P_n^{-1})`` for a stack of (P_n, b_n).

    ``z`` is the matching (N, D) block of standard normals.  With
    ``P = L L^T`` the draw is ``L^{-T} (L^{-1} b + z)``.
    """
    precision = np.asarray(precision)
    if precision.shape[0] == 0:
        return np.zeros_like(linear)
    try:
        L = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        raise NumericalError("conditional precision is not SPD") from None
    w = np.linalg.solve(L, linear[..., None])[..., 0] + z
    return np.linalg.solve(np.swapaxes(L, -1, -2), w[..., None])[..., 0]


def _wishart_scale(scatter_inv):
    W = np.linalg.inv(scatter_inv)
    W = 0.5 * (W + W.T)
    try:
        np.linalg.cholesky(W)
    except np.linalg.LinAlgError:
        raise NumericalError("Wishart scale matrix is not SPD after the update") from None
    return W


def sample_mode_hyperparams(mode_state: ModeState, mode_data: ModeData, hyper: HyperPriorConfig, rng):
    """Draw ``(mu, Lambda)`` from their Normal-Wishart conditional.

    The data are the residuals ``r_i = c_i - beta x_i``.  When the mode has a
    link matrix, its Gaussian prior (which shares ``Lambda``) contributes
    ``lambda_beta * beta beta^T`` to the inverse scale and F degrees of freedom.
    """
    D = mode_state.D
    mu0, kappa0, nu0, W0 = hyper.resolve(D)
    R = mode_state.latent
    has_link = mode_state.beta is not None and mode_data.side_info is not None
    if has_link:
        R = R - mode_data.side_info.dot_rows(mode_state.beta).T
    N = R.shape[1]

    W_inv = np.linalg.inv(W0)
    kappa_n = kappa0 + N
    nu_n = nu0 + N
    if N > 0:
        rbar = R.mean(axis=1)
        dev = R - rbar[:, None]
        scatter = dev @ dev.T
        diff = rbar - mu0
        mu_n = (kappa0 * mu0 + N * rbar) / kappa_n
        W_inv = W_inv + scatter + (kappa0 * N / kappa_n) * np.outer(diff, diff)
    else:
        mu_n = mu0
    if has_link:
        W_inv = W_inv + mode_state.lambda_beta * (mode_state.beta @ mode_state.beta.T)
        nu_n += mode_state.beta.shape[1]
    W_n = _wishart_scale(W_inv)

    Lambda = np.atleast_2d(stats.wishart.rvs(df=nu_n, scale=W_n, random_state=rng))
    Lambda = 0.5 * (Lambda + Lambda.T)
    try:
        L = np.linalg.cholesky(kappa_n * Lambda)
    except np.linalg.LinAlgError:
        raise NumericalError("sampled Lambda is not SPD") from None
    mu = mu_n + np.linalg.solve(L.T, rng.standard_normal(D))
    return mu, Lambda


def sample_alpha(state: SamplerState, data: ObservationSet, hyper: HyperPriorConfig, rng) -> float:
    """Noise precision draw from ``Gamma(a0 + |I|/2, rate = b0 + SSE/2)``."""
    if hyper.alpha_fixed is not None:
        return float(hyper.alpha_fixed)
    n = len(data)
    sse = 0.0
    if n:
        resid = data.values - predict_cells(state, data.indices)
        sse = float(resid @ resid)
    rate = hyper.alpha_rate + 0.5 * sse
    if not np.isfinite(rate):
        raise NumericalError("sum of squared errors overflowed")
    return float(rng.gamma(hyper.alpha_shape + 0.5 * n, 1.0 / rate))


def sample_lambda_beta(mode_state: ModeState, hyper: HyperPriorConfig, rng) -> float:
    """Link-prior precision draw ``Gamma(a + D F / 2, rate = b + tr(Lambda beta beta^T) / 2)``."""
    beta = mode_state.beta
    if beta is None:
        raise ContractError("lambda_beta is only defined for modes with side information")
    D, F = beta.shape
    trace = float(np.einsum("ij,ik,jk->", mode_state.Lambda, beta, beta))
    rate = hyper.lambda_beta_rate + 0.5 * trace
    return float(rng.gamma(hyper.lambda_beta_shape + 0.5 * D * F, 1.0 / rate))
