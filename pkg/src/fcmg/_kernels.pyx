# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled smoother and sparse kernels.

Mirrors ``_kernels_py``.  Loops over subdomains run under OpenMP; each
subdomain writes only its own output slots and uses thread-private scratch,
so results do not depend on the thread count.  Dense local blocks are built
row-major and handed to LAPACK as their column-major transpose.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange, parallel
from libc.stdlib cimport malloc, free
from libc.string cimport memset
from scipy.linalg.cython_lapack cimport dgetrf, dgetrs

cnp.import_array()

BACKEND = "cython"


class SingularBlock(Exception):
    def __init__(self, sub):
        super().__init__(sub)
        self.sub = int(sub)


ctypedef cnp.int64_t i64
ctypedef cnp.int32_t i32
ctypedef cnp.uint16_t u16


def csr_matvec(const i64[::1] indptr, const i32[::1] indices, const double[::1] data,
               const double[::1] x, double[::1] out, int threads=1):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t i, k
    cdef double acc
    for i in prange(n, nogil=True, num_threads=threads, schedule="static"):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc = acc + data[k] * x[indices[k]]
        out[i] = acc
    return np.asarray(out)


def ordered_scatter_add(double[::1] target, const i64[::1] idx, const double[::1] vals):
    cdef Py_ssize_t k
    for k in range(idx.shape[0]):
        target[idx[k]] += vals[k]
    return np.asarray(target)


cdef inline void _extract_dense(const i64* indptr, const i32* indices, const double* data,
                                const i64* loc, int m, double* block) noexcept nogil:
    """Row-major ``block[a*m + b] = A[loc[a], loc[b]]`` by merging sorted index lists."""
    cdef int a, b
    cdef i64 k, stop, col
    memset(block, 0, m * m * sizeof(double))
    for a in range(m):
        k = indptr[loc[a]]
        stop = indptr[loc[a] + 1]
        b = 0
        while k < stop and b < m:
            col = indices[k]
            if col == loc[b]:
                block[a * m + b] = data[k]
                k += 1
                b += 1
            elif col < loc[b]:
                k += 1
            else:
                b += 1


cdef inline int _lu_solve(double* block, int* ipiv, double* rhs, int m, int nrhs, char trans) noexcept nogil:
    cdef int info = 0
    cdef int lda = m
    dgetrf(&m, &m, block, &lda, ipiv, &info)
    if info != 0:
        return info
    dgetrs(&trans, &m, &nrhs, block, &lda, ipiv, rhs, &lda, &info)
    return info


cdef inline int _inverse_rows(double* block, int* ipiv, double* rows, const i64* pos, int m) noexcept nogil:
    """Rows ``pos[0..2]`` of the inverse of a row-major block into ``rows`` (3 x m)."""
    cdef int k
    memset(rows, 0, 3 * m * sizeof(double))
    for k in range(3):
        rows[k * m + pos[k]] = 1.0
    # column-major view of the row-major block is L_i^T: solve L_i^T Y = E
    return _lu_solve(block, ipiv, rows, m, 3, b'N')


cdef inline void _rows_dot(const double* rows, const i64* idx, const double* r, int m,
                           double* o0, double* o1, double* o2) noexcept nogil:
    cdef int b
    cdef double a0 = 0.0, a1 = 0.0, a2 = 0.0, rv
    for b in range(m):
        rv = r[idx[b]]
        a0 = a0 + rows[b] * rv
        a1 = a1 + rows[m + b] * rv
        a2 = a2 + rows[2 * m + b] * rv
    o0[0] = a0
    o1[0] = a1
    o2[0] = a2


def inverse_slabs(const i64[::1] indptr, const i32[::1] indices, const double[::1] data,
                  const i64[::1] sub_ptr, const i64[::1] sub_idx, const i64[:, ::1] out_pos,
                  int threads=1):
    cdef Py_ssize_t n_sub = sub_ptr.shape[0] - 1
    cdef Py_ssize_t s, k, b
    cdef int m, max_m = 0, info
    cdef double* block
    cdef double* rhs
    cdef int* ipiv
    slabs_arr = np.zeros(3 * sub_ptr[n_sub])
    cdef double[::1] slabs = slabs_arr
    bad_arr = np.full(n_sub, 0, dtype=np.int32)
    cdef i32[::1] bad = bad_arr
    for s in range(n_sub):
        if sub_ptr[s + 1] - sub_ptr[s] > max_m:
            max_m = <int>(sub_ptr[s + 1] - sub_ptr[s])
    with nogil, parallel(num_threads=threads):
        block = <double*> malloc(max_m * max_m * sizeof(double))
        rhs = <double*> malloc(3 * max_m * sizeof(double))
        ipiv = <int*> malloc(max_m * sizeof(int))
        for s in prange(n_sub, schedule="static"):
            m = <int>(sub_ptr[s + 1] - sub_ptr[s])
            _extract_dense(&indptr[0], &indices[0], &data[0], &sub_idx[sub_ptr[s]], m, block)
            info = _inverse_rows(block, ipiv, rhs, &out_pos[s, 0], m)
            if info != 0:
                bad[s] = 1
            else:
                for k in range(3):
                    for b in range(m):
                        slabs[3 * sub_ptr[s] + k * m + b] = rhs[k * m + b]
        free(block)
        free(rhs)
        free(ipiv)
    hits = np.nonzero(bad_arr)[0]
    if len(hits):
        raise SingularBlock(hits[0])
    return slabs_arr


def apply_inverse(const i64[::1] sub_ptr, const i64[::1] sub_idx, const double[::1] slabs,
                  const i64[::1] subs, const double[::1] r, double[:, ::1] out, int threads=1):
    cdef Py_ssize_t t, s
    for t in prange(subs.shape[0], nogil=True, num_threads=threads, schedule="static"):
        s = subs[t]
        _rows_dot(&slabs[3 * sub_ptr[s]], &sub_idx[sub_ptr[s]], &r[0], <int>(sub_ptr[s + 1] - sub_ptr[s]),
                  &out[t, 0], &out[t, 1], &out[t, 2])
    return np.asarray(out)


def apply_none(const i64[::1] indptr, const i32[::1] indices, const double[::1] data,
               const i64[::1] sub_ptr, const i64[::1] sub_idx, const i64[:, ::1] out_pos,
               const i64[::1] subs, const double[::1] r, double[:, ::1] out, int threads=1):
    cdef Py_ssize_t t, s, b
    cdef int m, max_m = 0, info
    cdef double* block
    cdef double* rhs
    cdef int* ipiv
    bad_arr = np.zeros(subs.shape[0], dtype=np.int32)
    cdef i32[::1] bad = bad_arr
    for t in range(subs.shape[0]):
        s = subs[t]
        if sub_ptr[s + 1] - sub_ptr[s] > max_m:
            max_m = <int>(sub_ptr[s + 1] - sub_ptr[s])
    with nogil, parallel(num_threads=threads):
        block = <double*> malloc(max_m * max_m * sizeof(double) + 1)
        rhs = <double*> malloc(3 * max_m * sizeof(double) + 1)
        ipiv = <int*> malloc(max_m * sizeof(int) + 1)
        for t in prange(subs.shape[0], schedule="static"):
            s = subs[t]
            m = <int>(sub_ptr[s + 1] - sub_ptr[s])
            _extract_dense(&indptr[0], &indices[0], &data[0], &sub_idx[sub_ptr[s]], m, block)
            # same inverse rows and dot product as the cached path
            info = _inverse_rows(block, ipiv, rhs, &out_pos[s, 0], m)
            if info != 0:
                bad[t] = 1
            else:
                _rows_dot(rhs, &sub_idx[sub_ptr[s]], &r[0], m, &out[t, 0], &out[t, 1], &out[t, 2])
        free(block)
        free(rhs)
        free(ipiv)
    hits = np.nonzero(bad_arr)[0]
    if len(hits):
        raise SingularBlock(subs[hits[0]])
    return np.asarray(out)


def extract_local(const i64[::1] indptr, const i32[::1] indices, const double[::1] data,
                  const i64[::1] sub_ptr, const i64[::1] sub_idx, int threads=1):
    cdef Py_ssize_t n_sub = sub_ptr.shape[0] - 1
    cdef Py_ssize_t s, a, b, k, stop, cnt, m, base
    cdef i64 col
    # pass 1: counts
    nnz_arr = np.zeros(n_sub + 1, dtype=np.int64)
    cdef i64[::1] nnz_ptr = nnz_arr
    row_arr = np.zeros(sub_ptr[n_sub] + n_sub, dtype=np.int32)
    cdef i32[::1] row_ptr = row_arr
    for s in prange(n_sub, nogil=True, num_threads=threads, schedule="static"):
        m = sub_ptr[s + 1] - sub_ptr[s]
        base = sub_ptr[s] + s
        cnt = 0
        for a in range(m):
            k = indptr[sub_idx[sub_ptr[s] + a]]
            stop = indptr[sub_idx[sub_ptr[s] + a] + 1]
            b = 0
            while k < stop and b < m:
                col = indices[k]
                if col == sub_idx[sub_ptr[s] + b]:
                    cnt = cnt + 1
                    k = k + 1
                    b = b + 1
                elif col < sub_idx[sub_ptr[s] + b]:
                    k = k + 1
                else:
                    b = b + 1
            row_ptr[base + a + 1] = <i32>cnt
        nnz_ptr[s + 1] = cnt
    for s in range(n_sub):
        nnz_ptr[s + 1] += nnz_ptr[s]
    cols_arr = np.zeros(nnz_ptr[n_sub], dtype=np.uint16)
    vals_arr = np.zeros(nnz_ptr[n_sub])
    cdef u16[::1] cols = cols_arr
    cdef double[::1] vals = vals_arr
    for s in prange(n_sub, nogil=True, num_threads=threads, schedule="static"):
        m = sub_ptr[s + 1] - sub_ptr[s]
        cnt = nnz_ptr[s]
        for a in range(m):
            k = indptr[sub_idx[sub_ptr[s] + a]]
            stop = indptr[sub_idx[sub_ptr[s] + a] + 1]
            b = 0
            while k < stop and b < m:
                col = indices[k]
                if col == sub_idx[sub_ptr[s] + b]:
                    cols[cnt] = <u16>b
                    vals[cnt] = data[k]
                    cnt = cnt + 1
                    k = k + 1
                    b = b + 1
                elif col < sub_idx[sub_ptr[s] + b]:
                    k = k + 1
                else:
                    b = b + 1
    return row_arr, cols_arr, vals_arr, nnz_arr


def apply_matrix(const i32[::1] row_ptr, const u16[::1] cols, const double[::1] vals,
                 const i64[::1] nnz_ptr, const i64[::1] sub_ptr, const i64[:, ::1] out_pos,
                 const i64[::1] sub_idx, const i64[::1] subs, const double[::1] r,
                 double[:, ::1] out, int threads=1):
    cdef Py_ssize_t t, s, a, b, k, base
    cdef int m, max_m = 0, info
    cdef double* block
    cdef double* rhs
    cdef int* ipiv
    bad_arr = np.zeros(subs.shape[0], dtype=np.int32)
    cdef i32[::1] bad = bad_arr
    for t in range(subs.shape[0]):
        s = subs[t]
        if sub_ptr[s + 1] - sub_ptr[s] > max_m:
            max_m = <int>(sub_ptr[s + 1] - sub_ptr[s])
    with nogil, parallel(num_threads=threads):
        block = <double*> malloc(max_m * max_m * sizeof(double) + 1)
        rhs = <double*> malloc(3 * max_m * sizeof(double) + 1)
        ipiv = <int*> malloc(max_m * sizeof(int) + 1)
        for t in prange(subs.shape[0], schedule="static"):
            s = subs[t]
            m = <int>(sub_ptr[s + 1] - sub_ptr[s])
            base = sub_ptr[s] + s
            memset(block, 0, m * m * sizeof(double))
            for a in range(m):
                for k in range(nnz_ptr[s] + row_ptr[base + a], nnz_ptr[s] + row_ptr[base + a + 1]):
                    block[a * m + cols[k]] = vals[k]
            # same inverse rows and dot product as the cached path
            info = _inverse_rows(block, ipiv, rhs, &out_pos[s, 0], m)
            if info != 0:
                bad[t] = 1
            else:
                _rows_dot(rhs, &sub_idx[sub_ptr[s]], &r[0], m, &out[t, 0], &out[t, 1], &out[t, 2])
        free(block)
        free(rhs)
        free(ipiv)
    hits = np.nonzero(bad_arr)[0]
    if len(hits):
        raise SingularBlock(subs[hits[0]])
    return np.asarray(out)
