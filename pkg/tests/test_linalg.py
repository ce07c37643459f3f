import numpy as np
import pytest
import scipy.sparse
from hypothesis import given, settings
from hypothesis import strategies as st

from fcmg.linalg import (
    AccumulationPlan,
    SingularBlockError,
    SparseMatrix,
    extract_submatrix,
    fixed_order_accumulate,
    lu_factor,
    lu_solve,
)


def random_coo(rng, n=12, m=10, nnz=60):
    return rng.integers(0, n, nnz), rng.integers(0, m, nnz), rng.standard_normal(nnz)


def test_from_coo_matches_scipy_sum(rng):
    r, c, v = random_coo(rng)
    M = SparseMatrix.from_coo(r, c, v, (12, 10))
    ref = scipy.sparse.coo_matrix((v, (r, c)), shape=(12, 10)).toarray()
    np.testing.assert_allclose(M.todense(), ref, rtol=1e-14, atol=1e-14)
    for k in range(12):
        cols = M.indices[M.indptr[k] : M.indptr[k + 1]]
        assert np.all(np.diff(cols) > 0)


def test_explicit_zeros_are_kept():
    M = SparseMatrix.from_coo([0, 0, 1], [1, 1, 0], [1.0, -1.0, 0.0], (2, 2))
    assert M.nnz == 2
    assert np.all(M.data == 0.0)


def test_matvec_matches_scipy(rng):
    r, c, v = random_coo(rng, 30, 30, 200)
    M = SparseMatrix.from_coo(r, c, v, (30, 30))
    x = rng.standard_normal(30)
    np.testing.assert_allclose(M.matvec(x), M.to_scipy() @ x, rtol=1e-13, atol=1e-13)


def test_matvec_thread_count_is_bitwise_invariant(rng):
    r, c, v = random_coo(rng, 500, 500, 5000)
    M = SparseMatrix.from_coo(r, c, v, (500, 500))
    x = rng.standard_normal(500)
    assert np.array_equal(M.matvec(x, 1), M.matvec(x, 4))


def test_matvec_dimension_mismatch():
    M = SparseMatrix.from_coo([0], [0], [1.0], (2, 3))
    with pytest.raises(ValueError, match="dimension mismatch"):
        M.matvec(np.ones(2))


def test_transpose_roundtrip(rng):
    r, c, v = random_coo(rng)
    M = SparseMatrix.from_coo(r, c, v, (12, 10))
    np.testing.assert_array_equal(M.T.todense(), M.todense().T)
    np.testing.assert_array_equal(M.T.T.todense(), M.todense())


def test_from_scipy_roundtrip(rng):
    A = scipy.sparse.random(20, 15, density=0.2, random_state=3, format="csr")
    M = SparseMatrix.from_scipy(A)
    np.testing.assert_array_equal(M.todense(), A.toarray())


def test_extract_submatrix_matches_dense(rng):
    A = scipy.sparse.random(25, 25, density=0.3, random_state=4, format="csr")
    M = SparseMatrix.from_scipy(A)
    rows = np.array([1, 4, 7, 20])
    cols = np.array([0, 3, 4, 9, 24])
    np.testing.assert_array_equal(extract_submatrix(M, rows, cols), A.toarray()[np.ix_(rows, cols)])
    with pytest.raises(IndexError):
        extract_submatrix(M, [30], cols)


def test_lu_matches_numpy(rng):
    A = rng.standard_normal((8, 8)) + 8 * np.eye(8)
    b = rng.standard_normal(8)
    np.testing.assert_allclose(lu_solve(lu_factor(A), b), np.linalg.solve(A, b), rtol=1e-12)


def test_lu_exact_zero_pivot_raises():
    A = np.array([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(SingularBlockError, match="zero pivot"):
        lu_factor(A, name=7)


def test_lu_rejects_non_square():
    with pytest.raises(ValueError):
        lu_factor(np.zeros((2, 3)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 50))
def test_fixed_order_accumulate_ignores_arrival_order(seed, n):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, 7, n)
    vals = rng.standard_normal(n) * 10.0 ** rng.integers(-8, 8, n)
    origin = rng.integers(0, 4, n)
    perm = rng.permutation(n)
    a = fixed_order_accumulate(np.zeros(7), idx, vals, origin)
    b = fixed_order_accumulate(np.zeros(7), idx[perm], vals[perm], origin[perm])
    assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 60))
def test_accumulation_plan_matches_sequential_sorted_sum(seed, n):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, 5, n)
    origin = rng.permutation(n)
    vals = rng.standard_normal(n)
    plan = AccumulationPlan(idx, origin)
    out = plan.apply(np.zeros(5), vals)
    ref = np.zeros(5)
    for k in np.lexsort((origin, idx)):
        ref[idx[k]] += vals[k]
    assert np.array_equal(out, ref)
