"""Geometric multigrid on the adaptive quadtree hierarchy.

Every level is re-assembled from the weak form on its own mesh.  Levels
are connected by Q1 interpolation between free DoFs; restriction is the
transpose.  The coarsest level is solved by dense LU.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import smoother as sm
from .assembly import (
    PhysicalParams,
    SaddleOperator,
    assemble,
    compute_quadratures,
)
from .geometry import LevelSetDomain
from .linalg import AccumulationPlan, SparseMatrix, lu_factor, lu_solve
from .mesh import MAX_LEVEL, Forest, GridLevel, build_hierarchy

__all__ = [
    "CoarseSolveError",
    "Transfer",
    "Level",
    "Hierarchy",
    "SolveReport",
    "build_transfer",
    "build_hierarchy_solver",
    "vcycle",
    "solve",
    "iterate_checksum",
]


class CoarseSolveError(RuntimeError):
    pass


@dataclass
class Transfer:
    """Prolongation ``P`` (coarse -> fine, all fields) and ``R = P^T``."""

    P: SparseMatrix
    R: SparseMatrix

    def prolong(self, x, threads: int = 1) -> np.ndarray:
        return self.P.matvec(x, threads)

    def restrict(self, r, threads: int = 1) -> np.ndarray:
        return self.R.matvec(r, threads)


def _node_weights(coarse: GridLevel, fine: GridLevel):
    """Scalar interpolation rows: fine free node -> (coarse free node, weight)."""
    # free nodes are numbered in node order
    keys = fine.nodes.keys[~fine.nodes.hanging]
    X, Y = keys[:, 0], keys[:, 1]
    cell = coarse.locate(keys)
    lev, i, j = coarse.leaves[cell].T
    s = np.int64(1) << (MAX_LEVEL - lev)
    # dyadic ratios: exact in floating point
    xi = (X - i * s) / s
    et = (Y - j * s) / s
    shape = np.stack([(1 - xi) * (1 - et), xi * (1 - et), (1 - xi) * et, xi * et], axis=1)
    ids, wts, valid = coarse.node_expansion()
    cn = coarse.corner_nodes[cell]  # (nf, 4)
    W = ids.shape[1]
    rows = np.repeat(np.arange(len(keys)), 4 * W)
    cols = ids[cn].reshape(-1)
    vals = (shape[:, :, None] * wts[cn]).reshape(-1)
    keep = valid[cn].reshape(-1) & (vals != 0.0)
    return rows[keep], cols[keep], vals[keep]


def build_transfer(coarse: GridLevel, fine: GridLevel) -> Transfer:
    r, c, v = _node_weights(coarse, fine)
    nfu, ncu = 2 * fine.n_free, 2 * coarse.n_free
    rows = np.concatenate([2 * r, 2 * r + 1, nfu + r])
    cols = np.concatenate([2 * c, 2 * c + 1, ncu + c])
    vals = np.concatenate([v, v, v])
    P = SparseMatrix.from_coo(rows, cols, vals, (3 * fine.n_free, 3 * coarse.n_free))
    return Transfer(P, P.transpose())


@dataclass
class Level:
    mesh: GridLevel
    op: SaddleOperator
    smoother: sm.SmootherState | None
    quad: object = None


@dataclass
class Hierarchy:
    """``levels[0]`` is the coarsest; ``transfers[l]`` maps level ``l-1`` to ``l``."""

    levels: list
    transfers: list
    coarse_lu: object
    nu1: int = 6
    nu2: int = 6
    threads: int = 1
    setup_seconds: float = 0.0
    smoother_seconds: float = 0.0
    partitions: int = 1
    negative_control: bool = False
    _plans: dict = field(default_factory=dict)

    @property
    def fine(self) -> Level:
        return self.levels[-1]

    def __len__(self) -> int:
        return len(self.levels)


def build_hierarchy_solver(
    fine: Forest,
    domain: LevelSetDomain,
    params: PhysicalParams,
    L: int,
    policy: str = "cache_inverse",
    omega: float = 0.8,
    nu1: int = 6,
    nu2: int = 6,
    threads: int = 1,
    k: int = 4,
    q: int = 2,
    resolution: int = 8,
    coarse_cap: int = 6000,
) -> Hierarchy:
    t0 = time.perf_counter()
    meshes = build_hierarchy(fine, L).levels
    n0 = 3 * meshes[0].n_free
    if n0 > coarse_cap:
        raise CoarseSolveError(
            f"coarse level has {n0} DoFs, above the dense LU cap of {coarse_cap}; "
            "use a deeper hierarchy or raise the cap"
        )
    levels = []
    for lvl, mesh in enumerate(meshes):
        quad = compute_quadratures(mesh, domain, k, q, resolution, params.alpha_fict)
        op = assemble(mesh, quad, params)
        st = sm.init(op, policy, omega, threads) if lvl > 0 else None
        levels.append(Level(mesh, op, st, quad))
    transfers = [None] + [build_transfer(a.mesh, b.mesh) for a, b in zip(levels[:-1], levels[1:])]
    lu = lu_factor(levels[0].op.matrix.todense(), name="coarse")
    h = Hierarchy(levels, transfers, lu, nu1, nu2, threads)
    h.setup_seconds = time.perf_counter() - t0
    return h


def set_policy(h: Hierarchy, policy: str, omega: float | None = None) -> None:
    """Re-initialize every level smoother with another cache policy."""
    for lev in h.levels[1:]:
        w = lev.smoother.omega if omega is None else omega
        lev.smoother = sm.init(lev.op, policy, w, h.threads, subs=lev.smoother.subs)


def set_partitions(h: Hierarchy, n_ranks: int, negative_control: bool = False) -> None:
    """Run smoother and residuals rank by rank on ``n_ranks`` simulated processes."""
    if n_ranks < 1:
        raise sm.PartitionError("need at least one rank")
    h.partitions = int(n_ranks)
    h.negative_control = bool(negative_control)


# ---------------------------------------------------------------------------
# level kernels
# ---------------------------------------------------------------------------


def _partition(h: Hierarchy, lvl: int) -> sm.PartitionMap:
    n_p = h.levels[lvl].op.dofmap.n_p
    return sm.PartitionMap.contiguous(n_p, min(h.partitions, n_p))


def _residual(h: Hierarchy, lvl: int, x, b) -> np.ndarray:
    op = h.levels[lvl].op
    if h.partitions == 1 or lvl == 0:
        return b - op.matrix.matvec(x, h.threads)
    return b - _partitioned_matvec(h, lvl, x)


def _partitioned_matvec(h: Hierarchy, lvl: int, x) -> np.ndarray:
    """``L x`` with each rank forming the products of the columns it owns.

    The products are merged in ``(row, column)`` order, which is the order of
    the serial row sums.  With ``negative_control`` each rank instead sums its
    own share of every row and the partial sums are added in rank order.
    """
    op = h.levels[lvl].op
    M = op.matrix
    part = _partition(h, lvl)
    own = part.dof_owner(op.dofmap.n_u)[M.indices]
    rows = M.row_ids()
    prod = M.data * x[M.indices]
    if h.negative_control:
        out = np.zeros(M.shape[0])
        for rank in range(part.n_ranks):
            sel = own == rank
            partial = np.bincount(rows[sel], weights=prod[sel], minlength=M.shape[0])
            out += partial
        return out
    key = (lvl, part.n_ranks)
    plan = h._plans.get(key)
    if plan is None:
        # ranks emit their products in turn; the plan restores (row, column) order
        emit = np.argsort(own, kind="stable")
        plan = (emit, AccumulationPlan(rows[emit], M.indices[emit]))
        h._plans[key] = plan
    emit, acc = plan
    return acc.apply(np.zeros(M.shape[0]), prod[emit])


def _smooth(h: Hierarchy, lvl: int, x, b, sweeps: int) -> np.ndarray:
    st = h.levels[lvl].smoother
    for _ in range(sweeps):
        r = _residual(h, lvl, x, b)
        t = time.perf_counter()
        if h.partitions == 1:
            d = sm.apply(st, r)
        else:
            d = sm.apply_partitioned(st, r, _partition(h, lvl))
        h.smoother_seconds += time.perf_counter() - t
        x = x + d
    return x


def vcycle(h: Hierarchy, lvl: int, x, b) -> np.ndarray:
    """One V-cycle on level ``lvl`` (0 = coarsest) starting from ``x``."""
    if lvl == 0:
        return lu_solve(h.coarse_lu, b)
    x = _smooth(h, lvl, x, b, h.nu1)
    rc = h.transfers[lvl].restrict(_residual(h, lvl, x, b), h.threads)
    ec = vcycle(h, lvl - 1, np.zeros_like(rc), rc)
    x = x + h.transfers[lvl].prolong(ec, h.threads)
    return _smooth(h, lvl, x, b, h.nu2)


def iterate_checksum(x) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype=np.float64).tobytes()).hexdigest()


@dataclass
class SolveReport:
    iterations: int
    ratios: list
    converged: bool
    setup_seconds: float
    vcycle_seconds: list
    smoother_seconds: float
    checksums: list
    config: dict = field(default_factory=dict)

    @property
    def solve_seconds(self) -> float:
        return float(sum(self.vcycle_seconds))

    def summary(self) -> str:
        per = self.smoother_seconds / max(self.iterations, 1)
        return (
            f"iterations={self.iterations} converged={self.converged} "
            f"final_ratio={self.ratios[-1]:.3e} setup_s={self.setup_seconds:.3f} "
            f"solve_s={self.solve_seconds:.3f} smoother_s_per_iteration={per:.4f}"
        )


def solve(h: Hierarchy, b=None, target: float = 1e-9, max_iter: int = 100, x0=None, config=None):
    """Standalone V-cycle iteration; returns ``(x, SolveReport)``.

    The ratio is ``|b - Lx| / |b|``, or ``|b - Lx|`` when ``b = 0``.
    """
    top = len(h) - 1
    op = h.fine.op
    b = op.rhs if b is None else np.asarray(b, dtype=float)
    x = np.zeros(op.n) if x0 is None else np.array(x0, dtype=float)
    nb = float(np.linalg.norm(b))
    scale = nb if nb > 0 else 1.0
    h.smoother_seconds = 0.0
    ratio = float(np.linalg.norm(_residual(h, top, x, b))) / scale
    ratios, times, sums = [ratio], [], [iterate_checksum(x)]
    it = 0
    while ratio > target and it < max_iter:
        t = time.perf_counter()
        x = vcycle(h, top, x, b)
        times.append(time.perf_counter() - t)
        it += 1
        ratio = float(np.linalg.norm(_residual(h, top, x, b))) / scale
        ratios.append(ratio)
        sums.append(iterate_checksum(x))
        if not np.isfinite(ratio):
            break
    rep = SolveReport(it, ratios, bool(ratio <= target), h.setup_seconds, times, h.smoother_seconds, sums, dict(config or {}))
    return x, rep
