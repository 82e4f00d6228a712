"""Posterior analyses of the measurement-type mode.

The measurement mode is the last mode of a 3-mode model (compound x protein x
measurement).  Its latent rows are compared across two slices (by default
slice 0 vs slice 1) after scaling by the norms of the compound and protein
factors, which removes the CP rescaling ambiguity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import ContractError

__all__ = [
    "rmse",
    "normalized_measurement_latents",
    "MeasurementLatentReport",
    "divergence_scores",
    "select_divergent_dims",
    "InteractionAccumulator",
    "InteractionDifferenceTable",
    "interaction_difference",
    "nearest_rank_quantile",
    "rank_proteins",
    "DiscriminationResult",
    "pair_type_discrimination",
]


def rmse(predicted, actual) -> float:
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape:
        raise ContractError("predicted and actual must have the same length")
    if predicted.size == 0:
        raise ContractError("rmse of an empty vector is undefined")
    return float(np.sqrt(np.mean((predicted - actual) ** 2)))


def _latents(sample):
    mats = getattr(sample, "modes", None)
    if mats is not None:
        mats = [ms.latent for ms in mats]
    else:
        mats = list(sample)
    if len(mats) != 3:
        raise ContractError(f"expected a 3-mode sample, got {len(mats)} modes")
    return mats


def normalized_measurement_latents(sample) -> np.ndarray:
    """N_t x D matrix ``t_{k,d} * ||c^(d)|| * ||p^(d)||``.

    ``sample`` is a SamplerState or a sequence of the three D x N latent
    matrices; c^(d) and p^(d) are the d-th rows of the first two.
    """
    C, P, T = _latents(sample)
    scale = np.linalg.norm(C, axis=1) * np.linalg.norm(P, axis=1)
    return (T * scale[:, None]).T


@dataclass
class MeasurementLatentReport:
    values: np.ndarray  # S x N_t x D
    selected_dims: np.ndarray  # bool, length D
    scores: np.ndarray  # posterior mean |delta_d|


def divergence_scores(values, first=0, second=1) -> np.ndarray:
    """Posterior mean over samples of ``|v[second, d] - v[first, d]|``."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 3:
        raise ContractError("expected an S x N_t x D array of normalized values")
    return np.abs(values[:, second, :] - values[:, first, :]).mean(axis=0)


def select_divergent_dims(values, tau=3.0, first=0, second=1, min_samples=30, min_score=1e-12):
    """Boolean mask of latent dimensions whose slices differ markedly.

    A dimension is selected when its score (see ``divergence_scores``)
    exceeds ``tau`` times the median score over all dimensions, and
    ``min_score`` in absolute terms.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 3:
        raise ContractError("expected an S x N_t x D array of normalized values")
    if values.shape[0] < min_samples:
        raise ContractError(f"need at least {min_samples} retained samples, got {values.shape[0]}")
    scores = divergence_scores(values, first, second)
    return (scores > tau * np.median(scores)) & (scores > min_score)


def measurement_report(values, tau=3.0, first=0, second=1, min_samples=30):
    mask = select_divergent_dims(values, tau, first, second, min_samples)
    return MeasurementLatentReport(np.asarray(values), mask, divergence_scores(values, first, second))


class InteractionAccumulator:
    """Running posterior mean of ``C_ij = |m^T (c_i * p_j * (t_second - t_first))|``.

    Also keeps the signed version, whose mean is the reconstructed
    measurement offset restricted to the masked dimensions.
    """

    def __init__(self, mask, first=0, second=1):
        self.mask = np.asarray(mask, dtype=bool)
        if not self.mask.any():
            raise ContractError(
                "mask selects no dimensions: no divergent dimensions were found, "
                "so there is no difference term to tabulate"
            )
        self.first = first
        self.second = second
        self.count = 0
        self._abs = None
        self._signed = None

    def add(self, sample):
        C, P, T = _latents(sample)
        if C.shape[0] != self.mask.shape[0]:
            raise ContractError("mask length does not match D")
        m = self.mask
        w = T[m, self.second] - T[m, self.first]
        signed = C[m].T @ (w[:, None] * P[m])
        if self._abs is None:
            self._abs = np.zeros_like(signed)
            self._signed = np.zeros_like(signed)
        self._abs += np.abs(signed)
        self._signed += signed
        self.count += 1

    def mean(self):
        if self.count == 0:
            raise ContractError("no samples accumulated")
        return self._abs / self.count

    def signed_mean(self):
        if self.count == 0:
            raise ContractError("no samples accumulated")
        return self._signed / self.count


def nearest_rank_quantile(x, q=0.95, axis=0):
    """Nearest-rank quantile: the ceil(q * n)-th smallest value."""
    x = np.sort(np.asarray(x, dtype=float), axis=axis)
    n = x.shape[axis]
    if n == 0:
        raise ContractError("quantile of an empty set")
    k = max(1, math.ceil(q * n - 1e-9))
    return np.take(x, k - 1, axis=axis)


@dataclass
class InteractionDifferenceTable:
    chat: np.ndarray  # N_c x N_p posterior mean of C_ij
    q95: np.ndarray  # per protein
    signed: Optional[np.ndarray] = None

    @classmethod
    def from_chat(cls, chat, signed=None, q=0.95):
        chat = np.asarray(chat, dtype=float)
        return cls(chat, nearest_rank_quantile(chat, q, axis=0), signed)


def interaction_difference(samples: Iterable, mask, first=0, second=1, q=0.95) -> InteractionDifferenceTable:
    """Posterior-averaged interaction differences and per-protein quantiles.

    ``samples`` yields SamplerStates or (C, P, T) latent triples.
    """
    acc = InteractionAccumulator(mask, first, second)
    for s in samples:
        acc.add(s)
    return InteractionDifferenceTable.from_chat(acc.mean(), acc.signed_mean(), q)


def rank_proteins(table, top_n: int):
    """Proteins ordered by q95, descending; ties go to the lower index.

    Returns ``(top, bottom)``: the first and the last ``top_n`` entries of
    that order, each a list of ``(protein_index, q95)``.
    """
    q95 = np.asarray(getattr(table, "q95", table), dtype=float)
    if not 0 <= top_n <= q95.shape[0]:
        raise ContractError(f"top_n={top_n} exceeds the number of proteins ({q95.shape[0]})")
    order = np.lexsort((np.arange(q95.shape[0]), -q95))
    ranked = [(int(j), float(q95[j])) for j in order]
    return ranked[:top_n], ranked[len(ranked) - top_n:]


@dataclass
class DiscriminationResult:
    mean_competitive: float
    mean_noncompetitive: float
    t_statistic: float
    p_value: float
    degenerate: bool = False


def pair_type_discrimination(deltas, labels) -> DiscriminationResult:
    """Welch t-test on ``|delta|`` between competitive and non-competitive pairs.

    ``labels`` are booleans (True = competitive) or the strings
    ``"competitive"`` / ``"noncompetitive"``.
    """
    deltas = np.abs(np.asarray(deltas, dtype=float))
    labels = np.asarray(labels)
    if labels.dtype.kind in "US":
        unknown = set(labels.tolist()) - {"competitive", "noncompetitive"}
        if unknown:
            raise ContractError(f"unknown labels {sorted(unknown)}")
        comp = labels == "competitive"
    else:
        comp = labels.astype(bool)
    if deltas.shape != comp.shape:
        raise ContractError("deltas and labels must have the same length")
    a, b = deltas[comp], deltas[~comp]
    if a.size < 2 or b.size < 2:
        raise ContractError("need at least 2 pairs in each group")
    ma, mb = float(a.mean()), float(b.mean())
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        if ma == mb:
            return DiscriminationResult(ma, mb, 0.0, 1.0, degenerate=True)
        return DiscriminationResult(ma, mb, math.copysign(math.inf, ma - mb), 0.0, degenerate=True)
    res = stats.ttest_ind(a, b, equal_var=False)
    return DiscriminationResult(ma, mb, float(res.statistic), float(res.pvalue))
