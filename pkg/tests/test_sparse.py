import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayestf.errors import ContractError, ConvergenceError, NumericalError
from bayestf.sparse import (
    CgSettings,
    SparseMatrix,
    apply_K,
    cg_solve_multi,
    k_operator,
    spmv,
    spmv_t,
)
from oracle import dense_solve, random_sparse_dense

A23 = np.array([[1.0, 0.0, 2.0], [0.0, 3.0, 0.0]])


@st.composite
def sparse_and_vectors(draw):
    n = draw(st.integers(0, 12))
    f = draw(st.integers(1, 12))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    dense = random_sparse_dense(rng, n, f, density=draw(st.floats(0.0, 1.0)))
    return dense, rng.standard_normal(n), rng.standard_normal(f), rng.standard_normal(f)


class TestSparseMatrix:
    def test_from_dense_round_trip(self):
        A = SparseMatrix.from_dense(A23)
        assert A.shape == (2, 3)
        np.testing.assert_array_equal(A.row_offsets, [0, 2, 3])
        np.testing.assert_array_equal(A.col_indices, [0, 2, 1])
        np.testing.assert_array_equal(A.to_dense(), A23)

    def test_explicit_zeros_tolerated(self):
        A = SparseMatrix(2, 2, [0, 2, 2], [0, 1], [0.0, 5.0])
        np.testing.assert_array_equal(spmv(A, [1.0, 1.0]), [5.0, 0.0])

    @pytest.mark.parametrize(
        "offsets, cols, vals",
        [
            ([0, 1, 3], [0, 1], [1.0, 2.0]),  # last offset != nnz
            ([0, 2, 1], [0, 1], [1.0, 2.0]),  # decreasing
            ([0, 2, 2], [1, 0], [1.0, 2.0]),  # unsorted within a row
            ([0, 2, 2], [1, 1], [1.0, 2.0]),  # repeated column
            ([0, 1, 2], [0, 5], [1.0, 2.0]),  # column out of range
            ([1, 1, 2], [0, 1], [1.0, 2.0]),  # does not start at 0
        ],
    )
    def test_invalid_layout_rejected(self, offsets, cols, vals):
        with pytest.raises(ContractError):
            SparseMatrix(2, 2, offsets, cols, vals)

    def test_new_row_may_restart_column_order(self):
        A = SparseMatrix(2, 3, [0, 2, 3], [1, 2, 0], [1.0, 1.0, 1.0])
        assert A.nnz == 3

    def test_from_coo_duplicates(self):
        with pytest.raises(ContractError, match="duplicate"):
            SparseMatrix.from_coo(2, 2, [0, 0], [1, 1], [1.0, 2.0])
        A = SparseMatrix.from_coo(2, 2, [0, 0], [1, 1], [1.0, 2.0], sum_duplicates=True)
        np.testing.assert_array_equal(A.to_dense(), [[0, 3], [0, 0]])

    def test_immutable(self):
        A = SparseMatrix.from_dense(A23)
        with pytest.raises(ValueError):
            A.values[0] = 4.0

    def test_take_rows(self):
        A = SparseMatrix.from_dense(A23)
        np.testing.assert_array_equal(A.take_rows([1, 0]).to_dense(), A23[[1, 0]])


class TestSpmv:
    def test_identity(self):
        I = SparseMatrix.from_dense(np.eye(2))
        np.testing.assert_array_equal(spmv(I, [3.0, -1.0]), [3.0, -1.0])
        np.testing.assert_array_equal(spmv_t(I, [4.0, 5.0]), [4.0, 5.0])

    def test_zero(self):
        Z = SparseMatrix.empty(3, 2)
        np.testing.assert_array_equal(spmv(Z, [1.0, 1.0]), [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(spmv_t(Z, [1.0, 2.0, 3.0]), [0.0, 0.0])

    def test_hand_values(self):
        A = SparseMatrix.from_dense(A23)
        np.testing.assert_array_equal(spmv(A, [1.0, 1.0, 1.0]), A23 @ [1, 1, 1])
        np.testing.assert_array_equal(spmv(A, [1.0, 1.0, 1.0]), [3.0, 3.0])
        np.testing.assert_array_equal(spmv_t(A, [1.0, 1.0]), [1.0, 3.0, 2.0])

    def test_block_columns(self, rng):
        dense = random_sparse_dense(rng, 7, 5)
        A = SparseMatrix.from_dense(dense)
        V = rng.standard_normal((5, 3))
        np.testing.assert_allclose(spmv(A, V), dense @ V, rtol=1e-13, atol=1e-13)
        W = rng.standard_normal((7, 3))
        np.testing.assert_allclose(spmv_t(A, W), dense.T @ W, rtol=1e-13, atol=1e-13)

    def test_dimension_mismatch(self):
        A = SparseMatrix.from_dense(A23)
        with pytest.raises(ContractError):
            spmv(A, [1.0, 1.0])
        with pytest.raises(ContractError):
            spmv_t(A, [1.0, 1.0, 1.0])

    @settings(max_examples=60, deadline=None)
    @given(sparse_and_vectors())
    def test_adjointness(self, case):
        dense, u, v, _ = case
        A = SparseMatrix.from_dense(dense)
        lhs = u @ spmv(A, v)
        rhs = spmv_t(A, u) @ v
        scale = np.abs(u) @ np.abs(dense) @ np.abs(v) + 1e-300
        assert abs(lhs - rhs) <= 1e-12 * scale


class TestApplyK:
    def test_empty_x(self):
        X = SparseMatrix.empty(0, 2)
        np.testing.assert_array_equal(apply_K(X, 2.0, [1.0, -3.0]), [2.0, -6.0])

    def test_identity_x(self):
        X = SparseMatrix.from_dense(np.eye(2))
        np.testing.assert_array_equal(apply_K(X, 1.0, [1.0, 1.0]), [2.0, 2.0])

    def test_dense_oracle(self):
        Xd = np.array([[1.0, 2.0], [0.0, 1.0]])
        X = SparseMatrix.from_dense(Xd)
        expected = (Xd.T @ Xd + 0.5 * np.eye(2)) @ [1.0, 0.0]
        np.testing.assert_allclose(expected, [1.5, 2.0])
        np.testing.assert_allclose(apply_K(X, 0.5, [1.0, 0.0]), [1.5, 2.0])

    @pytest.mark.parametrize("lam", [0.0, -1.0])
    def test_non_positive_lambda(self, lam):
        with pytest.raises(ContractError):
            apply_K(SparseMatrix.from_dense(np.eye(2)), lam, [1.0, 1.0])

    @settings(max_examples=60, deadline=None)
    @given(sparse_and_vectors(), st.floats(-3, 3), st.floats(-3, 3), st.floats(0.01, 10))
    def test_linearity_and_positivity(self, case, a, b, lam):
        dense, _, u, v = case
        X = SparseMatrix.from_dense(dense)
        lhs = apply_K(X, lam, a * u + b * v)
        rhs = a * apply_K(X, lam, u) + b * apply_K(X, lam, v)
        scale = np.max(np.abs(a * apply_K(X, lam, np.abs(u)))) + np.max(
            np.abs(b * apply_K(X, lam, np.abs(v)))) + 1e-300
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * scale
        assert v @ apply_K(X, lam, v) >= lam * (v @ v) * (1 - 1e-12)


class TestCg:
    def test_identity(self, rng):
        B = rng.standard_normal((4, 3))
        op = lambda v: v
        np.testing.assert_allclose(cg_solve_multi(op, B), B)

    def test_diagonal(self):
        d = np.array([2.0, 4.0])
        op = lambda v: d[:, None] * v if v.ndim == 2 else d * v
        np.testing.assert_allclose(cg_solve_multi(op, np.array([[2.0], [8.0]])), [[1.0], [2.0]])
        np.testing.assert_allclose(cg_solve_multi(op, np.array([2.0, 8.0])), [1.0, 2.0])

    def test_random_spd_against_cholesky(self, rng):
        dense = random_sparse_dense(rng, 8, 5)
        X = SparseMatrix.from_dense(dense)
        B = rng.standard_normal((5, 2))
        cfg = CgSettings(rel_tolerance=1e-12, max_iterations=100)
        got = cg_solve_multi(k_operator(X, 1.0), B, cfg)
        ref = dense_solve(dense, 1.0, B)
        assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) <= 1e-8

    def test_residual_postcondition(self, rng):
        dense = random_sparse_dense(rng, 30, 40, 0.2)
        X = SparseMatrix.from_dense(dense)
        B = rng.standard_normal((40, 4)) * np.array([1.0, 1e-3, 1e3, 1.0])
        cfg = CgSettings(rel_tolerance=1e-6)
        op = k_operator(X, 0.7)
        res = cg_solve_multi(op, B, cfg, return_info=True)
        resid = np.linalg.norm(op(res.x) - B, axis=0)
        assert np.all(resid <= np.maximum(1e-6 * np.linalg.norm(B, axis=0), 1e-12))

    def test_columns_are_independent(self, rng):
        dense = random_sparse_dense(rng, 20, 15)
        op = k_operator(SparseMatrix.from_dense(dense), 0.3)
        B = rng.standard_normal((15, 3))
        block = cg_solve_multi(op, B)
        for j in range(3):
            single = cg_solve_multi(op, B[:, j])
            np.testing.assert_allclose(block[:, j], single, rtol=1e-8, atol=1e-10)

    def test_zero_rhs(self):
        op = k_operator(SparseMatrix.from_dense(np.eye(3)), 1.0)
        np.testing.assert_array_equal(cg_solve_multi(op, np.zeros((3, 2))), np.zeros((3, 2)))

    def test_warm_start_same_tolerance(self, rng):
        dense = random_sparse_dense(rng, 20, 15)
        op = k_operator(SparseMatrix.from_dense(dense), 0.3)
        B = rng.standard_normal((15, 2))
        exact = dense_solve(dense, 0.3, B)
        cfg = CgSettings(rel_tolerance=1e-12, max_iterations=100)
        warm = cg_solve_multi(op, B, cfg, x0=exact + 1e-3)
        np.testing.assert_allclose(warm, exact, rtol=1e-8, atol=1e-10)

    def test_non_convergence_reports_residuals(self, rng):
        dense = random_sparse_dense(rng, 40, 30, 0.5)
        op = k_operator(SparseMatrix.from_dense(dense), 1e-3)
        B = rng.standard_normal((30, 2))
        with pytest.raises(ConvergenceError) as exc:
            cg_solve_multi(op, B, CgSettings(rel_tolerance=1e-14, max_iterations=2))
        assert exc.value.residuals.shape == (2,)
        assert np.all(exc.value.residuals > 0)

    def test_nan_detected(self):
        op = lambda v: v * np.nan
        with pytest.raises(NumericalError):
            cg_solve_multi(op, np.ones((3, 1)))

    def test_dimension_mismatch(self):
        op = k_operator(SparseMatrix.from_dense(np.eye(3)), 1.0)
        with pytest.raises(ContractError):
            cg_solve_multi(op, np.ones((4, 1)))

    @pytest.mark.parametrize("F", [3, 10, 25, 50])
    def test_converges_within_dimension_plus_five(self, rng, F):
        # well conditioned: binary features, ~2 per row, lambda comparable to X^T X
        dense = (rng.random((F + 5, F)) < 2.0 / F).astype(float)
        op = k_operator(SparseMatrix.from_dense(dense), 1.0)
        B = rng.standard_normal((F, 3))
        res = cg_solve_multi(op, B, CgSettings(max_iterations=F + 5),
                             return_info=True)
        assert np.all(res.iterations <= F + 5)

    def test_settings_validation(self):
        with pytest.raises(ContractError):
            CgSettings(rel_tolerance=0.0)
        with pytest.raises(ContractError):
            CgSettings(max_iterations=0)
        assert CgSettings().iteration_cap(5) == 5
        assert CgSettings().iteration_cap(10**6) == 1000
