"""Restricted additive subdomain smoother for the saddle-point operator.

One subdomain per pressure DoF ``p_i``.  Its input set holds ``p_i``, the
pressures coupled to it in the pressure block, and every velocity coupled
to one of those pressures through ``B^T``.  A subdomain solves its local
block exactly but writes back only the ``1 + d`` DoFs of node ``i``, so the
output sets of all subdomains partition the unknowns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse

from ._backend import SINGULAR_ERRORS, kernels
from .assembly import SaddleOperator
from .linalg import SingularBlockError, fixed_order_accumulate

__all__ = [
    "POLICIES",
    "Subdomains",
    "SmootherState",
    "PartitionMap",
    "PartitionError",
    "build_subdomains",
    "init",
    "apply",
    "apply_partitioned",
    "memory_report",
]

POLICIES = ("cache_none", "cache_matrix", "cache_inverse")
DIM = 2


class PartitionError(ValueError):
    pass


@dataclass
class Subdomains:
    """Concatenated input sets; subdomain ``i`` is ``idx[ptr[i]:ptr[i + 1]]``."""

    ptr: np.ndarray  # int64 (n_p + 1,)
    idx: np.ndarray  # int64, sorted within each subdomain
    out_pos: np.ndarray  # int64 (n_p, 3): local rows of (u_x(i), u_y(i), p_i)
    out_dofs: np.ndarray  # int64 (n_p, 3): global DoFs of the same rows

    def __len__(self) -> int:
        return len(self.ptr) - 1

    def sizes(self) -> np.ndarray:
        return np.diff(self.ptr)

    def input_set(self, i: int) -> np.ndarray:
        return self.idx[self.ptr[i] : self.ptr[i + 1]]


def build_subdomains(op: SaddleOperator) -> Subdomains:
    """Input/output sets from the sparsity pattern (stored entries, zeros included)."""
    dm = op.dofmap
    nu, n_p = dm.n_u, dm.n_p
    L = op.matrix.to_scipy()
    pat = scipy.sparse.csr_matrix(
        (np.ones(L.nnz, dtype=np.int32), L.indices, L.indptr), shape=L.shape
    )
    pp = pat[nu:, nu:]
    pu = pat[nu:, :nu]
    vel = (pp @ pu).tocsr()
    n = dm.n
    sets = scipy.sparse.csr_matrix((vel.data, vel.indices, vel.indptr), shape=(n_p, n)) + scipy.sparse.csr_matrix(
        (pp.data, pp.indices + nu, pp.indptr), shape=(n_p, n)
    )
    sets.sort_indices()
    ptr = sets.indptr.astype(np.int64)
    idx = sets.indices.astype(np.int64)
    out_dofs = np.stack([2 * np.arange(n_p), 2 * np.arange(n_p) + 1, nu + np.arange(n_p)], axis=1)
    out_pos = np.empty((n_p, 3), dtype=np.int64)
    owner = np.repeat(np.arange(n_p), np.diff(ptr))
    key = owner * (dm.n + 1) + idx
    for k in range(3):
        q = np.searchsorted(key, np.arange(n_p) * (dm.n + 1) + out_dofs[:, k])
        q = np.minimum(q, len(key) - 1)
        if np.any(key[q] != np.arange(n_p) * (dm.n + 1) + out_dofs[:, k]):
            bad = int(np.nonzero(key[q] != np.arange(n_p) * (dm.n + 1) + out_dofs[:, k])[0][0])
            raise ValueError(f"subdomain {bad} does not contain its own node DoFs")
        out_pos[:, k] = q - ptr[:-1]
    return Subdomains(ptr, idx, np.ascontiguousarray(out_pos), np.ascontiguousarray(out_dofs))


@dataclass
class SmootherState:
    policy: str
    omega: float
    subs: Subdomains
    op: SaddleOperator
    threads: int = 1
    slabs: np.ndarray | None = None
    local: tuple | None = None  # (row_ptr, cols, vals, nnz_ptr)

    @property
    def n(self) -> int:
        return self.op.n


def _singular(exc, what="") -> SingularBlockError:
    i = int(exc.sub)
    return SingularBlockError(f"singular local block for pressure id {i}{what}", i)


def init(op: SaddleOperator, policy: str = "cache_inverse", omega: float = 0.8, threads: int = 1, subs=None) -> SmootherState:
    if policy not in POLICIES:
        raise ValueError(f"unknown cache policy {policy!r}; expected one of {POLICIES}")
    if subs is None:
        subs = build_subdomains(op)
    st = SmootherState(policy, float(omega), subs, op, int(threads))
    M = op.matrix
    try:
        if policy == "cache_inverse":
            st.slabs = kernels.inverse_slabs(M.indptr, M.indices, M.data, subs.ptr, subs.idx, subs.out_pos, st.threads)
        elif policy == "cache_matrix":
            st.local = kernels.extract_local(M.indptr, M.indices, M.data, subs.ptr, subs.idx, st.threads)
    except SINGULAR_ERRORS as exc:
        raise _singular(exc) from None
    return st


def _local_corrections(st: SmootherState, r: np.ndarray, sel: np.ndarray) -> np.ndarray:
    """``(len(sel), 3)`` output rows of ``L_i^{-1} r_i`` for subdomains ``sel``."""
    s = st.subs
    out = np.empty((len(sel), 3))
    M = st.op.matrix
    try:
        if st.policy == "cache_inverse":
            kernels.apply_inverse(s.ptr, s.idx, st.slabs, sel, r, out, st.threads)
        elif st.policy == "cache_matrix":
            rp, cols, vals, nnz = st.local
            kernels.apply_matrix(rp, cols, vals, nnz, s.ptr, s.out_pos, s.idx, sel, r, out, st.threads)
        else:
            kernels.apply_none(M.indptr, M.indices, M.data, s.ptr, s.idx, s.out_pos, sel, r, out, st.threads)
    except SINGULAR_ERRORS as exc:
        raise _singular(exc) from None
    return out


def _check(st: SmootherState, r) -> np.ndarray:
    r = np.ascontiguousarray(r, dtype=np.float64)
    if r.shape != (st.n,):
        raise ValueError(f"dimension mismatch: residual {r.shape}, operator ({st.n},)")
    return r


def apply(st: SmootherState, r) -> np.ndarray:
    """Correction ``S r = sum_i R~_i^T omega L_i^{-1} R_i r``."""
    r = _check(st, r)
    sel = np.arange(len(st.subs), dtype=np.int64)
    c = _local_corrections(st, r, sel)
    out = np.zeros(st.n)
    # output sets are disjoint, so the scatter is a permutation
    out[st.subs.out_dofs.ravel()] = st.omega * c.ravel()
    return out


@dataclass
class PartitionMap:
    """Contiguous ownership of pressure ids (and thus subdomains) by ``P`` ranks."""

    n_ranks: int
    owner: np.ndarray  # rank per pressure id

    @classmethod
    def contiguous(cls, n_p: int, n_ranks: int) -> "PartitionMap":
        if n_ranks < 1:
            raise PartitionError("need at least one rank")
        if n_ranks > n_p:
            raise PartitionError(f"{n_ranks} ranks for {n_p} pressure ids")
        owner = (np.arange(n_p, dtype=np.int64) * n_ranks) // n_p
        return cls(int(n_ranks), owner)

    def owned(self, rank: int) -> np.ndarray:
        return np.nonzero(self.owner == rank)[0]

    def validate(self, n_p: int) -> None:
        if len(self.owner) != n_p:
            raise PartitionError(f"owner map covers {len(self.owner)} of {n_p} pressure ids")
        bad = np.nonzero((self.owner < 0) | (self.owner >= self.n_ranks))[0]
        if len(bad):
            raise PartitionError(f"pressure id {int(bad[0])} is not owned by any rank")

    def dof_owner(self, n_u: int) -> np.ndarray:
        """Owner of every DoF: node DoFs follow their pressure id."""
        n_p = len(self.owner)
        own = np.empty(n_u + n_p, dtype=np.int64)
        own[0:n_u:2] = self.owner
        own[1:n_u:2] = self.owner
        own[n_u:] = self.owner
        return own

    def offprocess_subdomains(self, subs: Subdomains, n_u: int) -> np.ndarray:
        """Per rank: owned subdomains whose input set reads another rank's DoFs."""
        own = self.dof_owner(n_u)
        sub_of = np.repeat(np.arange(len(subs)), subs.sizes())
        foreign = own[subs.idx] != self.owner[sub_of]
        touched = np.zeros(len(subs), dtype=bool)
        touched[sub_of[foreign]] = True
        return np.bincount(self.owner[touched], minlength=self.n_ranks)


def apply_partitioned(st: SmootherState, r, partition: PartitionMap) -> np.ndarray:
    """Same correction computed rank by rank and merged in a fixed order."""
    r = _check(st, r)
    partition.validate(len(st.subs))
    idx, vals, origin = [], [], []
    for rank in range(partition.n_ranks):
        sel = partition.owned(rank)
        c = _local_corrections(st, r, sel)
        idx.append(st.subs.out_dofs[sel].ravel())
        vals.append(st.omega * c.ravel())
        origin.append(np.full(3 * len(sel), rank, dtype=np.int64))
    return fixed_order_accumulate(np.zeros(st.n), np.concatenate(idx), np.concatenate(vals), np.concatenate(origin))


def memory_report(st: SmootherState) -> dict:
    """Bytes held by the smoother, from the stored array lengths."""
    s = st.subs
    rep = {
        "policy": st.policy,
        "index_bytes": int(s.ptr.nbytes + s.idx.nbytes + s.out_pos.nbytes + s.out_dofs.nbytes),
        "cached_matrix_bytes": 0,
        "cached_slab_bytes": 0,
    }
    if st.local is not None:
        rep["cached_matrix_bytes"] = int(sum(a.nbytes for a in st.local))
    if st.slabs is not None:
        rep["cached_slab_bytes"] = int(st.slabs.nbytes)
    rep["cached_bytes"] = rep["cached_matrix_bytes"] + rep["cached_slab_bytes"]
    return rep
