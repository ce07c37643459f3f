"""Pure-numpy kernels; same signatures as the compiled ``_kernels`` module.

Subdomains are passed as a concatenated index list: subdomain ``s`` owns
``sub_idx[sub_ptr[s]:sub_ptr[s + 1]]`` (sorted global DoFs) and its output
rows sit at local positions ``out_pos[s]``.  Every per-subdomain result is
computed with element-wise arithmetic or one LAPACK call per block, so it
does not depend on which other subdomains are processed alongside it.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"
_CHUNK = 2048


class SingularBlock(Exception):
    def __init__(self, sub):
        super().__init__(sub)
        self.sub = int(sub)


def csr_matvec(indptr, indices, data, x, out, threads=1):
    n = len(indptr) - 1
    prod = data * x[indices]
    out[:] = 0.0
    rows = np.repeat(np.arange(n), np.diff(indptr))
    np.add.at(out, rows, prod)
    return out


def ordered_scatter_add(target, idx, vals):
    """``target[idx[k]] += vals[k]`` for k in order, sequentially."""
    np.add.at(target, idx, vals)
    return target


def _by_size(sub_ptr, subs):
    sizes = sub_ptr[subs + 1] - sub_ptr[subs]
    for m in np.unique(sizes):
        pos = np.nonzero(sizes == m)[0]
        for c in range(0, len(pos), _CHUNK):
            yield int(m), pos[c : c + _CHUNK]


def _local_index(sub_ptr, sub_idx, sel, m):
    return sub_idx[sub_ptr[sel][:, None] + np.arange(m)[None, :]]


def _extract_dense(indptr, indices, data, loc):
    """Dense blocks ``A[loc[s]][:, loc[s]]`` for a group of equal-size subdomains."""
    g, m = loc.shape
    out = np.zeros((g, m, m))
    n = len(indptr) - 1
    # rows of loc shifted into disjoint ranges -> one flat sorted array
    shift = np.arange(g, dtype=np.int64)[:, None] * (n + 1)
    flat = (loc + shift).ravel()
    for a in range(m):
        rows = loc[:, a]
        start, stop = indptr[rows], indptr[rows + 1]
        width = int((stop - start).max(initial=0))
        if width == 0:
            continue
        k = start[:, None] + np.arange(width)[None, :]
        valid = k < stop[:, None]
        k = np.where(valid, k, 0)
        cols = np.where(valid, indices[k], n)
        # position of each stored column inside the local index set
        p = np.searchsorted(flat, cols + shift) - np.arange(g)[:, None] * m
        p = np.clip(p, 0, m - 1)
        hit = valid & (np.take_along_axis(loc, p, axis=1) == cols)
        sidx, widx = np.nonzero(hit)
        out[sidx, a, p[sidx, widx]] = data[k[sidx, widx]]
    return out


def _solve(blocks, rhs, sel, subs):
    try:
        return np.linalg.solve(blocks, rhs)
    except np.linalg.LinAlgError:
        for t in range(len(blocks)):
            try:
                np.linalg.solve(blocks[t], rhs[t])
            except np.linalg.LinAlgError:
                raise SingularBlock(subs[sel[t]]) from None
        raise


def _slab_rows(blocks, out_pos_sel, sel, subs):
    """Rows ``out_pos`` of each block inverse, shape ``(g, 3, m)``, via ``L^T Y = E``."""
    g, m, _ = blocks.shape
    e = np.zeros((g, m, 3))
    for k in range(3):
        e[np.arange(g), out_pos_sel[:, k], k] = 1.0
    y = _solve(np.transpose(blocks, (0, 2, 1)), e, sel, subs)
    return np.transpose(y, (0, 2, 1))


def _rows_dot(y, rl):
    """``y @ rl`` per subdomain, accumulated left to right over the local index."""
    acc = np.zeros(y.shape[:2])
    for b in range(y.shape[2]):
        acc += y[:, :, b] * rl[:, b : b + 1]
    return acc


def inverse_slabs(indptr, indices, data, sub_ptr, sub_idx, out_pos, threads=1):
    """Rows ``out_pos[s]`` of each local inverse, flattened ``(3, m_s)`` per subdomain."""
    n_sub = len(sub_ptr) - 1
    subs = np.arange(n_sub)
    slabs = np.zeros(3 * int(sub_ptr[-1]))
    for m, sel in _by_size(sub_ptr, subs):
        loc = _local_index(sub_ptr, sub_idx, sel, m)
        blocks = _extract_dense(indptr, indices, data, loc)
        y = _slab_rows(blocks, out_pos[sel], sel, subs)
        base = 3 * sub_ptr[sel]
        dst = base[:, None, None] + np.arange(3)[None, :, None] * m + np.arange(m)[None, None, :]
        slabs[dst] = y
    return slabs


def apply_inverse(sub_ptr, sub_idx, slabs, subs, r, out, threads=1):
    subs = np.asarray(subs, dtype=np.int64)
    for m, sel in _by_size(sub_ptr, subs):
        s = subs[sel]
        loc = _local_index(sub_ptr, sub_idx, s, m)
        base = 3 * sub_ptr[s]
        src = base[:, None, None] + np.arange(3)[None, :, None] * m + np.arange(m)[None, None, :]
        out[sel] = _rows_dot(slabs[src], r[loc])
    return out


# The uncached policies rebuild the same inverse rows and apply them with the
# same dot product, so all three policies agree bit for bit.


def apply_none(indptr, indices, data, sub_ptr, sub_idx, out_pos, subs, r, out, threads=1):
    subs = np.asarray(subs, dtype=np.int64)
    for m, sel in _by_size(sub_ptr, subs):
        s = subs[sel]
        loc = _local_index(sub_ptr, sub_idx, s, m)
        blocks = _extract_dense(indptr, indices, data, loc)
        out[sel] = _rows_dot(_slab_rows(blocks, out_pos[s], sel, subs), r[loc])
    return out


def extract_local(indptr, indices, data, sub_ptr, sub_idx, threads=1):
    """Local CSR blocks: ``(row_ptr, cols, vals, nnz_ptr)``.

    ``row_ptr`` has ``m_s + 1`` entries per subdomain starting at
    ``sub_ptr[s] + s``; ``nnz_ptr[s]`` is the first entry of subdomain ``s``
    in ``cols``/``vals``; column indices are local.
    """
    n_sub = len(sub_ptr) - 1
    row_ptr = np.zeros(int(sub_ptr[-1]) + n_sub, dtype=np.int32)
    cols_out, vals_out = [], []
    nnz_ptr = np.zeros(n_sub + 1, dtype=np.int64)
    for s in range(n_sub):
        loc = sub_idx[sub_ptr[s] : sub_ptr[s + 1]]
        m = len(loc)
        base = sub_ptr[s] + s
        cnt = 0
        for a, g in enumerate(loc):
            c = indices[indptr[g] : indptr[g + 1]]
            p = np.searchsorted(loc, c)
            p = np.minimum(p, m - 1)
            hit = loc[p] == c
            cols_out.append(p[hit].astype(np.uint16))
            vals_out.append(data[indptr[g] : indptr[g + 1]][hit])
            cnt += int(hit.sum())
            row_ptr[base + a + 1] = cnt
        nnz_ptr[s + 1] = nnz_ptr[s] + cnt
    cols = np.concatenate(cols_out) if cols_out else np.zeros(0, np.uint16)
    vals = np.concatenate(vals_out) if vals_out else np.zeros(0)
    return row_ptr, cols, vals, nnz_ptr


def apply_matrix(row_ptr, cols, vals, nnz_ptr, sub_ptr, out_pos, sub_idx, subs, r, out, threads=1):
    subs = np.asarray(subs, dtype=np.int64)
    for m, sel in _by_size(sub_ptr, subs):
        s = subs[sel]
        g = len(s)
        blocks = np.zeros((g, m, m))
        for t in range(g):
            q = s[t]
            rp = row_ptr[sub_ptr[q] + q : sub_ptr[q] + q + m + 1]
            k0, k1 = nnz_ptr[q], nnz_ptr[q + 1]
            rows = np.repeat(np.arange(m), np.diff(rp))
            blocks[t, rows, cols[k0:k1]] = vals[k0:k1]
        loc = _local_index(sub_ptr, sub_idx, s, m)
        out[sel] = _rows_dot(_slab_rows(blocks, out_pos[s], sel, subs), r[loc])
    return out
