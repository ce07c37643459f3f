"""Deterministic sparse and dense kernels.

Every reduction here has a fixed summation order: CSR rows are summed in
ascending column order and scattered contributions are sorted before they
are added.  That is what makes operator applications and smoother sweeps
bitwise reproducible across thread counts and simulated partitions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse

from ._backend import kernels

__all__ = [
    "SparseMatrix",
    "DenseLU",
    "SingularBlockError",
    "AccumulationPlan",
    "extract_submatrix",
    "lu_factor",
    "lu_solve",
    "fixed_order_accumulate",
]


class SingularBlockError(ValueError):
    """Exact zero pivot in a dense factorization."""

    def __init__(self, message: str, block=None):
        super().__init__(message)
        self.block = block


@dataclass
class SparseMatrix:
    """Compressed-row matrix with strictly ascending columns per row."""

    indptr: np.ndarray  # int64
    indices: np.ndarray  # int32
    data: np.ndarray  # float64
    shape: tuple[int, int]

    def __post_init__(self):
        self.indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int32)
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)

    @classmethod
    def from_coo(cls, rows, cols, vals, shape) -> "SparseMatrix":
        """Sum duplicates sequentially in input order; explicit zeros are kept."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        nr, nc = shape
        key = rows * nc + cols
        order = np.argsort(key, kind="stable")
        key = key[order]
        ukey, inv = np.unique(key, return_inverse=True)
        data = np.zeros(len(ukey))
        kernels.ordered_scatter_add(data, np.ascontiguousarray(inv, dtype=np.int64), np.ascontiguousarray(vals[order]))
        urow = ukey // nc
        indptr = np.zeros(nr + 1, dtype=np.int64)
        np.cumsum(np.bincount(urow, minlength=nr), out=indptr[1:])
        return cls(indptr, (ukey % nc).astype(np.int32), data, (int(nr), int(nc)))

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        m = scipy.sparse.csr_matrix(m)
        m.sort_indices()
        m.sum_duplicates()
        return cls(m.indptr, m.indices, m.data, m.shape)

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.shape[0], dtype=np.int64), np.diff(self.indptr))

    def matvec(self, x, threads: int = 1, out=None) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape != (self.shape[1],):
            raise ValueError(f"dimension mismatch: {x.shape} vs {self.shape}")
        if out is None:
            out = np.empty(self.shape[0])
        return kernels.csr_matvec(self.indptr, self.indices, self.data, x, out, threads)

    __matmul__ = matvec

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_coo(self.indices, self.row_ids(), self.data, self.shape[::-1])

    @property
    def T(self) -> "SparseMatrix":
        return self.transpose()

    def to_scipy(self) -> scipy.sparse.csr_matrix:
        return scipy.sparse.csr_matrix((self.data, self.indices, self.indptr), shape=self.shape)

    def todense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids(), self.indices] = self.data
        return out

    def max_abs(self) -> float:
        return float(np.abs(self.data).max(initial=0.0))


def extract_submatrix(M: SparseMatrix, rows, cols) -> np.ndarray:
    """Dense block ``M[rows][:, cols]``; index sets must be sorted ascending."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    nr, nc = M.shape
    if len(rows) and (rows.min() < 0 or rows.max() >= nr):
        raise IndexError("row index out of range")
    if len(cols) and (cols.min() < 0 or cols.max() >= nc):
        raise IndexError("column index out of range")
    out = np.zeros((len(rows), len(cols)))
    if len(cols) == 0:
        return out
    for a, g in enumerate(rows):
        c = M.indices[M.indptr[g] : M.indptr[g + 1]]
        p = np.minimum(np.searchsorted(cols, c), len(cols) - 1)
        hit = cols[p] == c
        out[a, p[hit]] = M.data[M.indptr[g] : M.indptr[g + 1]][hit]
    return out


@dataclass
class DenseLU:
    lu: np.ndarray
    piv: np.ndarray
    m: int


def lu_factor(block, name=None) -> DenseLU:
    """LU with partial pivoting; an exact zero pivot raises :class:`SingularBlockError`."""
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 2 or block.shape[0] != block.shape[1]:
        raise ValueError("block must be square")
    m = block.shape[0]
    if m == 0:
        return DenseLU(block.copy(), np.zeros(0, dtype=np.int32), 0)
    lu, piv, info = scipy.linalg.lapack.dgetrf(block)
    if info > 0:
        label = f" in subdomain {name}" if name is not None else ""
        raise SingularBlockError(f"singular block{label}: zero pivot at column {info - 1}", name)
    if info < 0:
        raise ValueError(f"dgetrf argument error {info}")
    return DenseLU(lu, piv, m)


def lu_solve(lu: DenseLU, rhs, trans: int = 0) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=np.float64)
    if lu.m == 0:
        return rhs.copy()
    return scipy.linalg.lu_solve((lu.lu, lu.piv), rhs, trans=trans, check_finite=False)


class AccumulationPlan:
    """Fixed summation order for a recurring set of scattered contributions.

    Contributions are ordered by ``(index, origin)``; the ordering is computed
    once and reused for every set of values with the same structure.
    """

    def __init__(self, indices, origins=None):
        idx = np.asarray(indices, dtype=np.int64)
        if origins is None:
            origins = np.arange(len(idx))
        self.order = np.lexsort((np.asarray(origins, dtype=np.int64), idx))
        self.sorted_idx = np.ascontiguousarray(idx[self.order])

    def apply(self, target, values) -> np.ndarray:
        out = np.array(target, dtype=np.float64, copy=True)
        vals = np.ascontiguousarray(np.asarray(values, dtype=np.float64)[self.order])
        return kernels.ordered_scatter_add(out, self.sorted_idx, vals)


def fixed_order_accumulate(target, indices, values, origins=None) -> np.ndarray:
    """Add scattered contributions to a copy of ``target`` in a canonical order.

    Contributions are sorted by ``(index, origin, value)`` and then summed
    one at a time, so the result does not depend on the order in which the
    contributions arrived.
    """
    idx = np.asarray(indices, dtype=np.int64)
    vals = np.asarray(values, dtype=np.float64)
    keys = [vals, idx] if origins is None else [vals, np.asarray(origins, dtype=np.int64), idx]
    order = np.lexsort(keys)
    out = np.array(target, dtype=np.float64, copy=True)
    return kernels.ordered_scatter_add(
        out, np.ascontiguousarray(idx[order]), np.ascontiguousarray(vals[order])
    )
