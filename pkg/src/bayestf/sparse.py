"""CSR storage, sparse products and a matrix-free conjugate gradient solver.

The side-information matrices handled here can have 10^5-10^6 columns, so the
normal-equation operator ``K = X^T X + lam * I`` is only ever applied, never
formed.  ``spmv_t`` works straight off the CSR arrays; there is no CSC mirror.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
import math
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, ConvergenceError, NumericalError

__all__ = [
    "SparseMatrix",
    "CgSettings",
    "CgResult",
    "spmv",
    "spmv_t",
    "apply_K",
    "k_operator",
    "cg_solve_multi",
]

# below this many entries products go through a dense copy of X
_SMALL_DENSE = 1024


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Compressed sparse row matrix.

    Rows are entities, columns are features.  Explicit zeros are allowed.
    Instances are immutable and safe to share between threads.
    """

    nrows: int
    ncols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        offsets = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        cols = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        for arr in (offsets, cols, vals):
            arr.setflags(write=False)
        object.__setattr__(self, "row_offsets", offsets)
        object.__setattr__(self, "col_indices", cols)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "nrows", int(self.nrows))
        object.__setattr__(self, "ncols", int(self.ncols))
        self._validate()

    def _validate(self):
        if self.nrows < 0 or self.ncols < 0:
            raise ContractError("matrix dimensions must be non-negative")
        if self.row_offsets.shape != (self.nrows + 1,):
            raise ContractError(
                f"row_offsets must have length nrows+1={self.nrows + 1}, "
                f"got {self.row_offsets.shape[0]}"
            )
        nnz = self.col_indices.shape[0]
        if self.values.shape != (nnz,):
            raise ContractError("values and col_indices must have equal length")
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != nnz:
            raise ContractError("row_offsets must start at 0 and end at nnz")
        if np.any(np.diff(self.row_offsets) < 0):
            raise ContractError("row_offsets must be non-decreasing")
        if nnz:
            if self.col_indices.min() < 0 or self.col_indices.max() >= self.ncols:
                raise ContractError("column index out of range")
            # strictly increasing within a row: a step <= 0 is only legal at row starts
            steps = np.diff(self.col_indices)
            row_start = np.zeros(nnz, dtype=bool)
            starts = self.row_offsets[:-1][np.diff(self.row_offsets) > 0]
            row_start[starts] = True
            if np.any((steps <= 0) & ~row_start[1:]):
                raise ContractError("column indices must be strictly increasing within a row")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("stored values must be finite")

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def nnz(self):
        return int(self.col_indices.shape[0])

    @cached_property
    def _csr(self):
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets), shape=self.shape, copy=False
        )

    @cached_property
    def _csr_t(self):
        # transpose view of the same arrays (CSC); no data is copied
        return self._csr.T

    @cached_property
    def _small_dense(self):
        # tiny matrices: a dense copy is cheaper than the sparse dispatch
        if self.nrows * self.ncols > _SMALL_DENSE:
            return None
        return self._csr.toarray()

    @classmethod
    def from_coo(cls, nrows, ncols, rows, cols, values=None, sum_duplicates=False):
        """Build from coordinate triplets (0-based).

        Duplicate coordinates raise unless ``sum_duplicates`` is set.
        """
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if values is None:
            values = np.ones(rows.shape[0])
        values = np.asarray(values, dtype=np.float64)
        if not (rows.shape == cols.shape == values.shape):
            raise ContractError("rows, cols and values must have equal length")
        if rows.size:
            if rows.min() < 0 or rows.max() >= nrows:
                raise ContractError("row index out of range")
            if cols.min() < 0 or cols.max() >= ncols:
                raise ContractError("column index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        if rows.size > 1:
            dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if dup.any():
                if not sum_duplicates:
                    k = int(np.flatnonzero(dup)[0])
                    raise ContractError(f"duplicate entry at ({rows[k]}, {cols[k]})")
                keep = np.concatenate([[True], ~dup])
                group = np.cumsum(keep) - 1
                values = np.bincount(group, weights=values)
                rows, cols = rows[keep], cols[keep]
        offsets = np.zeros(nrows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=nrows), out=offsets[1:])
        return cls(nrows, ncols, offsets, cols, values)

    @classmethod
    def from_dense(cls, dense):
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2:
            raise ContractError("expected a 2-D array")
        rows, cols = np.nonzero(dense)
        return cls.from_coo(dense.shape[0], dense.shape[1], rows, cols, dense[rows, cols])

    @classmethod
    def from_scipy(cls, mat):
        mat = sp.csr_matrix(mat)
        mat.sum_duplicates()
        mat.sort_indices()
        return cls(mat.shape[0], mat.shape[1], mat.indptr, mat.indices, mat.data)

    @classmethod
    def empty(cls, nrows, ncols):
        return cls(nrows, ncols, np.zeros(nrows + 1, dtype=np.int64), [], [])

    def to_dense(self):
        out = np.zeros(self.shape)
        rows = np.repeat(np.arange(self.nrows), np.diff(self.row_offsets))
        out[rows, self.col_indices] = self.values
        return out

    def to_coo(self):
        """Return ``(rows, cols, values)`` in row-major order."""
        rows = np.repeat(np.arange(self.nrows), np.diff(self.row_offsets))
        return rows, self.col_indices.copy(), self.values.copy()

    def take_rows(self, index):
        """Sub-matrix holding the given rows, in the given order."""
        index = np.asarray(index, dtype=np.int64)
        return SparseMatrix.from_scipy(self._csr[index])

    def dot_rows(self, coef):
        """Return ``X @ coef.T`` for a D x F coefficient matrix, i.e. N x D."""
        coef = np.asarray(coef, dtype=np.float64)
        if coef.ndim != 2 or coef.shape[1] != self.ncols:
            raise ContractError(f"coefficient matrix must be D x {self.ncols}")
        return np.asarray(self._csr @ coef.T)

    def __repr__(self):
        return f"SparseMatrix(nrows={self.nrows}, ncols={self.ncols}, nnz={self.nnz})"


def _check_vec(v, n, what):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim not in (1, 2) or v.shape[0] != n:
        raise ContractError(f"{what}: expected leading dimension {n}, got shape {v.shape}")
    return v


def spmv(A: SparseMatrix, v) -> np.ndarray:
    """``A @ v``.  ``v`` may be a vector or an (ncols, k) block of columns."""
    v = _check_vec(v, A.ncols, "spmv")
    if A._small_dense is not None:
        return A._small_dense @ v
    return np.asarray(A._csr @ v)


def spmv_t(A: SparseMatrix, v) -> np.ndarray:
    """``A.T @ v`` computed from the CSR arrays."""
    v = _check_vec(v, A.nrows, "spmv_t")
    if A._small_dense is not None:
        return A._small_dense.T @ v
    return np.asarray(A._csr_t @ v)


def apply_K(X: SparseMatrix, lambda_beta: float, v) -> np.ndarray:
    """Apply ``K = X^T X + lambda_beta * I`` to ``v`` without forming ``X^T X``."""
    if not lambda_beta > 0:
        raise ContractError(f"lambda_beta must be positive, got {lambda_beta}")
    v = _check_vec(v, X.ncols, "apply_K")
    return spmv_t(X, spmv(X, v)) + lambda_beta * v


def k_operator(X: SparseMatrix, lambda_beta: float) -> Callable[[np.ndarray], np.ndarray]:
    """Bind ``apply_K`` to a fixed ``X`` and ``lambda_beta``."""
    if not lambda_beta > 0:
        raise ContractError(f"lambda_beta must be positive, got {lambda_beta}")

    A, At = X._csr, X._csr_t
    if X._small_dense is not None:
        A = X._small_dense
        At = A.T

    def op(v):
        # inner loop of CG: inputs are already validated float blocks
        return np.asarray(At @ (A @ v)) + lambda_beta * v

    op.dim = X.ncols
    return op


@dataclass(frozen=True)
class CgSettings:
    rel_tolerance: float = 1e-6
    abs_tolerance: float = 1e-12
    # None means min(F, 1000) for a system of dimension F
    max_iterations: Optional[int] = None

    def __post_init__(self):
        if not (self.rel_tolerance > 0 and self.abs_tolerance > 0):
            raise ContractError("CG tolerances must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ContractError("max_iterations must be >= 1")

    def iteration_cap(self, dim):
        if self.max_iterations is not None:
            return self.max_iterations
        return max(1, min(dim, 1000))


@dataclass
class CgResult:
    x: np.ndarray
    iterations: np.ndarray
    residuals: np.ndarray


def cg_solve_multi(op, rhs, settings: CgSettings = CgSettings(), x0=None, return_info=False):
    """Solve ``op(x) = b`` for every column ``b`` of ``rhs`` by conjugate gradient.

    ``op`` must be symmetric positive definite and accept an (F, k) block,
    returning the column-wise product.  Columns are iterated as independent
    CG recurrences sharing only the operator calls; a column stops updating
    as soon as its own residual passes ``max(rel_tol * ||b||, abs_tol)``, so
    each result is identical to solving that column alone.

    Convergence is confirmed on the true residual ``b - op(x)``, not only the
    recursively updated one.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    squeeze = rhs.ndim == 1
    if squeeze:
        rhs = rhs[:, None]
    if rhs.ndim != 2:
        raise ContractError("rhs must be a vector or a 2-D block")
    dim, ncol = rhs.shape
    op_dim = getattr(op, "dim", None)
    if op_dim is not None and op_dim != dim:
        raise ContractError(f"operator dimension {op_dim} does not match rhs rows {dim}")

    if x0 is None:
        x = np.zeros_like(rhs)
        r = rhs.copy()
    else:
        x = np.array(x0, dtype=np.float64).reshape(dim, ncol)
        r = rhs - op(x)
    threshold = np.maximum(settings.rel_tolerance * np.linalg.norm(rhs, axis=0),
                           settings.abs_tolerance)
    p = r.copy()
    rs = np.einsum("ij,ij->j", r, r)
    thr2 = threshold * threshold
    cap = settings.iteration_cap(dim)
    # every live column has taken the same number of steps, so one counter
    # serves them all; finished columns record theirs in ``iters``
    iters = np.zeros(ncol, dtype=np.int64)
    k = 0
    cols = np.flatnonzero(rs > thr2)
    full = cols.size == ncol

    while cols.size and k < cap:
        # while every column is live, whole-array ops avoid fancy-index copies
        pa = p if full else p[:, cols]
        Ap = op(pa)
        # a step that is not positive and finite means p^T K p is not either
        step = (rs if full else rs[cols]) / np.einsum("ij,ij->j", pa, Ap)
        if not 0 < step.min() < math.inf:
            raise NumericalError("conjugate gradient breakdown: p^T K p is not positive and finite")
        if full:
            x += step * pa
            r -= step * Ap
            rc = r
        else:
            x[:, cols] += step * pa
            r[:, cols] -= step * Ap
            rc = r[:, cols]
        rs_new = np.einsum("ij,ij->j", rc, rc)
        k += 1

        passed = rs_new <= (thr2 if full else thr2[cols])
        if not passed.any():
            if not math.isfinite(rs_new.sum()):
                raise NumericalError("NaN/inf in conjugate gradient iterates")
            if full:
                p *= rs_new / rs
                p += r
                rs[:] = rs_new
            else:
                p[:, cols] = rc + (rs_new / rs[cols]) * pa
                rs[cols] = rs_new
            continue

        # confirm on the true residual; columns that drifted restart from it
        dc = cols[passed]
        true_r = rhs[:, dc] - op(x[:, dc])
        true_rs = np.einsum("ij,ij->j", true_r, true_r)
        ok = true_rs <= thr2[dc]
        r[:, dc] = true_r
        rs_new[passed] = true_rs
        iters[dc[ok]] = k
        beta = rs_new / rs[cols]
        beta[passed] = 0.0
        keep = np.ones(cols.size, dtype=bool)
        keep[np.flatnonzero(passed)[ok]] = False
        if not math.isfinite(rs_new[keep].sum()):
            raise NumericalError("NaN/inf in conjugate gradient iterates")
        cc = cols[keep]
        p[:, cc] = r[:, cc] + beta[keep] * p[:, cc]
        rs[cc] = rs_new[keep]
        cols = cc
        full = False

    iters[cols] = k
    active = np.zeros(ncol, dtype=bool)
    active[cols] = True
    failed = active.any()
    if not (failed or return_info):
        return x[:, 0] if squeeze else x
    resid = np.linalg.norm(rhs - op(x), axis=0) if ncol else np.zeros(0)
    if failed:
        raise ConvergenceError(
            f"conjugate gradient did not converge in {cap} iterations "
            f"for {int(active.sum())} of {ncol} columns",
            resid,
        )
    if squeeze:
        x = x[:, 0]
    if return_info:
        return CgResult(x=x, iterations=iters, residuals=resid)
    return x
