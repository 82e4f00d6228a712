"""Forward simulation of the model, used as an oracle for end-to-end checks.

Side-information features are binary fingerprints built around a few
prototype bit patterns (entities of one family share most substructures),
which is what makes them informative about latent vectors of unseen
entities.  Latents of a featured mode follow ``c_i = beta x_i + noise``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Union

import numpy as np

from .errors import ContractError
from .model import ObservationSet
from .sparse import SparseMatrix

__all__ = ["GenSpec", "SyntheticData", "gen_synthetic", "split_cells"]


@dataclass
class GenSpec:
    dims: Sequence[int] = (60, 20, 2)
    D_true: int = 3
    # mode index -> number of binary features
    features: Dict[int, int] = field(default_factory=lambda: {0: 200})
    feature_density: float = 0.05
    n_prototypes: int = 10
    bit_flip: float = 0.1
    latent_noise_sd: float = 0.2
    noise_sd: float = 0.3
    # latent dims in which the last two slices of the last mode differ
    offset_dims: int = 0
    offset_scale: float = 1.5
    # True: offset dims are zero in every slice but the last, so the planted
    # difference is a separate additive term; False: added on top of the base
    offset_pure: bool = True
    # per-slice observation probability along the last mode (scalar = all slices)
    obs_density: Union[float, Sequence[float]] = 0.3
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.features = {int(k): int(v) for k, v in dict(self.features).items()}
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ContractError("dims must list at least two positive sizes")
        if self.D_true < 1:
            raise ContractError("D_true must be >= 1")
        if self.offset_dims < 0 or self.offset_dims > self.D_true:
            raise ContractError("offset_dims must be between 0 and D_true")
        if self.offset_dims and (len(self.dims) < 3 or self.dims[-1] < 2):
            raise ContractError("an offset needs a last mode with at least 2 slices")
        if any(not 0 <= m < len(self.dims) for m in self.features):
            raise ContractError("feature mode index out of range")
        if not 0 < self.feature_density <= 1:
            raise ContractError("feature_density must be in (0, 1]")
        if self.noise_sd < 0 or self.latent_noise_sd < 0:
            raise ContractError("noise levels must be non-negative")

    def slice_density(self):
        dens = np.broadcast_to(np.asarray(self.obs_density, dtype=float), (self.dims[-1],))
        if np.any(dens < 0) or np.any(dens > 1):
            raise ContractError("obs_density must be within [0, 1]")
        return dens

    def to_dict(self):
        out = dict(self.__dict__)
        out["dims"] = list(self.dims)
        out["features"] = {str(k): v for k, v in self.features.items()}
        if not np.isscalar(self.obs_density):
            out["obs_density"] = [float(v) for v in self.obs_density]
        return out


@dataclass
class SyntheticData:
    spec: GenSpec
    data: ObservationSet
    features: Dict[int, SparseMatrix]
    latents: list  # per mode D_true x N
    betas: Dict[int, np.ndarray]
    clean: np.ndarray  # noiseless value of every observed cell
    offset_dims: np.ndarray

    def true_offset(self, first=0, second=1):
        """N_0 x N_1 matrix of the planted slice difference ``y[.., second] - y[.., first]``."""
        C, P, T = self.latents[0], self.latents[1], self.latents[-1]
        w = T[:, second] - T[:, first]
        return C.T @ (w[:, None] * P)


def _fingerprints(rng, n, F, density, n_proto, flip):
    protos = rng.random((n_proto, F)) < density
    family = rng.integers(n_proto, size=n)
    X = protos[family].copy()
    drop = rng.random((n, F)) < flip
    add = rng.random((n, F)) < density * flip
    X = (X & ~drop) | add
    return SparseMatrix.from_dense(X.astype(float))


def gen_synthetic(spec: GenSpec) -> SyntheticData:
    rng = np.random.default_rng(spec.seed)
    D = spec.D_true
    n_modes = len(spec.dims)
    latents, betas, feats = [], {}, {}
    for m, n in enumerate(spec.dims):
        if m == n_modes - 1 and n_modes >= 3:
            # measurement-type mode: slices share one base vector
            base = 1.0 + 0.3 * rng.standard_normal(D)
            latents.append(np.repeat(base[:, None], n, axis=1))
            continue
        if m in spec.features:
            F = spec.features[m]
            X = _fingerprints(rng, n, F, spec.feature_density, spec.n_prototypes, spec.bit_flip)
            beta = rng.standard_normal((D, F)) / np.sqrt(F * spec.feature_density)
            lat = X.dot_rows(beta).T + spec.latent_noise_sd * rng.standard_normal((D, n))
            feats[m], betas[m] = X, beta
        else:
            lat = rng.standard_normal((D, n))
        latents.append(lat)

    offset = np.zeros(0, dtype=np.int64)
    if spec.offset_dims:
        offset = np.sort(rng.choice(D, size=spec.offset_dims, replace=False))
        signs = rng.choice([-1.0, 1.0], size=spec.offset_dims)
        if spec.offset_pure:
            latents[-1][offset, :] = 0.0
        latents[-1][offset, -1] += spec.offset_scale * signs

    dens = spec.slice_density()
    grids = np.meshgrid(*[np.arange(n) for n in spec.dims], indexing="ij")
    cells = np.stack([g.ravel() for g in grids], axis=1)
    keep = rng.random(cells.shape[0]) < dens[cells[:, -1]]
    cells = cells[keep]
    prod = np.ones((cells.shape[0], D))
    for m in range(n_modes):
        prod *= latents[m][:, cells[:, m]].T
    clean = prod.sum(axis=1)
    values = clean + spec.noise_sd * rng.standard_normal(clean.shape[0])
    data = ObservationSet(cells, values, spec.dims, check_duplicates=False)
    return SyntheticData(spec, data, feats, latents, betas, clean, offset)


def split_cells(data: ObservationSet, rng, fraction=0.2, slice_mode=None, slice_index=None,
                cold_mode=None, cold_fraction=0.0):
    """Hold out test cells and optionally make some entities cold-start.

    A random ``fraction`` of the cells (restricted to slice ``slice_index`` of
    ``slice_mode`` when given) forms the test set.  Independently, a random
    ``cold_fraction`` of the entities of ``cold_mode`` lose all their training
    cells, so they are known only through side information.

    Returns ``(train, test, cold_entities)``.
    """
    if not 0 <= fraction <= 1 or not 0 <= cold_fraction <= 1:
        raise ContractError("fractions must be within [0, 1]")
    cand = np.ones(len(data), dtype=bool)
    if slice_mode is not None:
        cand &= data.indices[:, slice_mode] == slice_index
    idx = np.flatnonzero(cand)
    test = np.zeros(len(data), dtype=bool)
    test[rng.choice(idx, size=int(round(fraction * idx.size)), replace=False)] = True
    cold = np.zeros(0, dtype=np.int64)
    dropped = np.zeros(len(data), dtype=bool)
    if cold_mode is not None and cold_fraction > 0:
        n = data.mode_dims[cold_mode]
        cold = np.sort(rng.choice(n, size=int(round(cold_fraction * n)), replace=False))
        dropped = np.isin(data.indices[:, cold_mode], cold)
    return data.subset(~test & ~dropped), data.subset(test), cold
