"""Stabilized Q1-Q1 finite cell Stokes system with Nitsche boundary terms.

DoF layout: free node ``k`` carries ``u_x = 2k``, ``u_y = 2k + 1`` and
``p = n_u + k``, so the assembled operator is the block matrix
``[[A, B], [B^T, C]]`` in natural order.  Element DoFs are ordered
``[ux0..ux3, uy0..uy3, p0..p3]`` with corners (bottom-left, bottom-right,
top-left, top-right).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.io
import scipy.sparse

from .geometry import (
    CellClass,
    LevelSetDomain,
    fitted_edge_quadrature,
    surface_quadrature_many,
    volume_quadrature_many,
)
from .linalg import SparseMatrix
from ._backend import kernels
from .mesh import GridLevel

__all__ = [
    "PhysicalParams",
    "DofMap",
    "CellQuadratures",
    "SaddleOperator",
    "AssemblyError",
    "compute_quadratures",
    "assemble",
    "apply_operator",
    "residual",
    "nodal_values",
    "velocity_l2",
    "export_operator",
]


def _zero_field(x, y):
    x = np.asarray(x, dtype=float)
    return np.zeros_like(x), np.zeros_like(x)


@dataclass
class PhysicalParams:
    eta: float = 1e-3
    alpha_fict: float = 1e-10
    beta_n: float = 100.0
    body_force: Callable = _zero_field
    dirichlet: dict = field(default_factory=dict)  # tag -> w(x, y) -> (wx, wy)
    neumann: dict = field(default_factory=dict)  # tag -> h(x, y) -> (hx, hy)

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("viscosity must be positive")
        if not 0 < self.alpha_fict <= 1:
            raise ValueError("alpha_fict must lie in (0, 1]")
        if not self.beta_n > 0:
            raise ValueError("Nitsche scale must be positive")


class AssemblyError(RuntimeError):
    pass


@dataclass
class DofMap:
    n_nodes: int  # free nodes

    @property
    def n_p(self) -> int:
        return self.n_nodes

    @property
    def n_u(self) -> int:
        return 2 * self.n_nodes

    @property
    def n(self) -> int:
        return 3 * self.n_nodes

    def velocity(self, k):
        k = np.asarray(k)
        return 2 * k, 2 * k + 1

    def pressure(self, k):
        return self.n_u + np.asarray(k)

    def node_of(self, dof):
        dof = np.asarray(dof)
        return np.where(dof < self.n_u, dof // 2, dof - self.n_u)

    def field_of(self, dof):
        """0 = u_x, 1 = u_y, 2 = p."""
        dof = np.asarray(dof)
        return np.where(dof < self.n_u, dof % 2, 2)


@dataclass
class CellQuadratures:
    classes: np.ndarray
    vol_offsets: np.ndarray
    vol_points: np.ndarray
    vol_weights: np.ndarray
    vol_alphas: np.ndarray
    # surface rules exist for cut cells only; surf_cells[c] is False otherwise
    surf_cells: np.ndarray
    surf_offsets: np.ndarray
    surf_points: np.ndarray
    surf_weights: np.ndarray
    surf_normals: np.ndarray
    surf_tags: np.ndarray
    degenerate: np.ndarray
    fitted: dict = field(default_factory=dict)  # cell -> SurfaceQuadrature
    neumann_tags: frozenset = frozenset()


def compute_quadratures(
    level: GridLevel,
    domain: LevelSetDomain,
    k: int = 4,
    q: int = 2,
    resolution: int = 8,
    alpha_fict: float = 1e-10,
) -> CellQuadratures:
    classes = level.forest.classify(domain, level.leaves)
    voff, vpts, vw, va = volume_quadrature_many(domain, level.bounds, classes, k, q, alpha_fict)
    m = level.n_cells
    cut = np.nonzero(classes == CellClass.CUT)[0]
    soff_c, spts, sw, snrm, stags, sdeg = surface_quadrature_many(domain, level.bounds[cut], resolution)
    counts = np.zeros(m, dtype=np.int64)
    counts[cut] = np.diff(soff_c)
    soff = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(counts, out=soff[1:])
    degenerate = np.zeros(m, dtype=bool)
    degenerate[cut] = sdeg
    surf_cells = np.zeros(m, dtype=bool)
    surf_cells[cut] = True
    fitted = {}
    if domain.fitted_sides:
        for c in range(m):
            sq = fitted_edge_quadrature(domain, level.bounds[c], q)
            if len(sq.weights):
                fitted[c] = sq
    return CellQuadratures(
        classes, voff, vpts, vw, va, surf_cells, soff, spts, sw, snrm, stags, degenerate, fitted,
        frozenset(domain.neumann_tags),
    )


@dataclass
class SaddleOperator:
    matrix: SparseMatrix
    rhs: np.ndarray
    dofmap: DofMap

    @property
    def n(self) -> int:
        return self.dofmap.n

    def blocks(self):
        """``(A, B, Bt, C)`` as scipy CSR matrices."""
        m = self.matrix.to_scipy()
        nu = self.dofmap.n_u
        return m[:nu, :nu], m[:nu, nu:], m[nu:, :nu], m[nu:, nu:]


# ---------------------------------------------------------------------------
# shape functions
# ---------------------------------------------------------------------------


def _shape(xi, eta):
    """Bilinear values and reference gradients at ``(xi, eta)`` arrays; shape (..., 4)."""
    xi = np.asarray(xi)
    eta = np.asarray(eta)
    val = np.stack([(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta], axis=-1)
    dxi = np.stack([-(1 - eta), 1 - eta, -eta, eta], axis=-1)
    deta = np.stack([-(1 - xi), -xi, 1 - xi, xi], axis=-1)
    return val, dxi, deta


_C_REF = np.array(
    [[7.0, -1.0, -1.0, -5.0], [-1.0, 7.0, -5.0, -1.0], [-1.0, -5.0, 7.0, -1.0], [-5.0, -1.0, -1.0, 7.0]]
) / 144.0


def _volume_element_blocks(level, quad, eta):
    """Per-cell ``K`` (4x4, alpha-weighted eta*grad.grad), ``Bx``, ``By`` (4x4) and f-weights."""
    m = level.n_cells
    h = level.bounds[:, 1] - level.bounds[:, 0]
    off = quad.vol_offsets
    npts = np.diff(off)
    cell = np.repeat(np.arange(m), npts)
    x0 = level.bounds[cell, 0]
    y0 = level.bounds[cell, 2]
    hc = h[cell]
    xi = (quad.vol_points[:, 0] - x0) / hc
    et = (quad.vol_points[:, 1] - y0) / hc
    val, dxi, deta = _shape(xi, et)
    dx = dxi / hc[:, None]
    dy = deta / hc[:, None]
    aw = quad.vol_alphas * quad.vol_weights
    K = np.zeros((m, 4, 4))
    Bx = np.zeros((m, 4, 4))
    By = np.zeros((m, 4, 4))
    starts = off[:-1]
    nonempty = npts > 0
    for a in range(4):
        for b in range(4):
            kab = aw * eta * (dx[:, a] * dx[:, b] + dy[:, a] * dy[:, b])
            K[nonempty, a, b] = np.add.reduceat(kab, starts[nonempty])
            Bx[nonempty, a, b] = np.add.reduceat(-aw * dx[:, a] * val[:, b], starts[nonempty])
            By[nonempty, a, b] = np.add.reduceat(-aw * dy[:, a] * val[:, b], starts[nonempty])
    return K, Bx, By, (cell, val, aw)


def _surface_terms(pts, wts, nrm, bounds, eta, lam):
    """Nitsche element contributions for one cell's boundary points."""
    x0, x1, y0, _ = bounds
    h = x1 - x0
    xi = (pts[:, 0] - x0) / h
    et = (pts[:, 1] - y0) / h
    val, dxi, deta = _shape(xi, et)
    dn = (nrm[:, 0:1] * dxi + nrm[:, 1:2] * deta) / h
    S = np.einsum("p,pa,pb->ab", wts, -eta * val, dn)
    S = S + S.T + lam * np.einsum("p,pa,pb->ab", wts, val, val)
    Gx = np.einsum("p,pa,pb->ab", wts * nrm[:, 0], val, val)
    Gy = np.einsum("p,pa,pb->ab", wts * nrm[:, 1], val, val)
    return S, Gx, Gy, val, dn


def assemble(
    level: GridLevel,
    quad: CellQuadratures,
    params: PhysicalParams,
) -> SaddleOperator:
    """Assemble ``L = [[A, B], [B^T, C]]`` and ``b = [f; g]`` on one grid level."""
    m = level.n_cells
    nf = level.n_free
    dm = DofMap(nf)
    eta = params.eta
    h = level.bounds[:, 1] - level.bounds[:, 0]
    lam = params.beta_n * eta / h

    K, Bx, By, (vcell, vval, vaw) = _volume_element_blocks(level, quad, eta)
    E = np.zeros((m, 12, 12))
    E[:, 0:4, 0:4] = K
    E[:, 4:8, 4:8] = K
    E[:, 0:4, 8:12] = Bx
    E[:, 4:8, 8:12] = By
    E[:, 8:12, 0:4] = np.transpose(Bx, (0, 2, 1))
    E[:, 8:12, 4:8] = np.transpose(By, (0, 2, 1))
    E[:, 8:12, 8:12] = -(h**2 / eta)[:, None, None] * _C_REF[None]
    F = np.zeros((m, 12))

    # body force
    fx, fy = params.body_force(quad.vol_points[:, 0], quad.vol_points[:, 1])
    fx = np.broadcast_to(np.asarray(fx, dtype=float), vaw.shape)
    fy = np.broadcast_to(np.asarray(fy, dtype=float), vaw.shape)
    if np.any(fx) or np.any(fy):
        for a in range(4):
            F[:, a] += np.bincount(vcell, weights=vaw * fx * vval[:, a], minlength=m)
            F[:, 4 + a] += np.bincount(vcell, weights=vaw * fy * vval[:, a], minlength=m)

    # boundary terms: immersed segments in cut cells, then fitted edges
    surf = []
    for c in np.nonzero(quad.classes == CellClass.CUT)[0]:
        if not quad.surf_cells[c]:
            raise AssemblyError(f"cut cell {c} (leaf {tuple(level.leaves[c])}) has no surface quadrature")
        s0, s1 = quad.surf_offsets[c], quad.surf_offsets[c + 1]
        if s1 > s0:
            surf.append(
                (c, quad.surf_points[s0:s1], quad.surf_weights[s0:s1], quad.surf_normals[s0:s1], quad.surf_tags[s0:s1])
            )
    for c, sq in sorted(quad.fitted.items()):
        surf.append((c, sq.points, sq.weights, sq.normals, sq.tags))

    for c, pts, wts, nrm, tags in surf:
        tags = np.asarray(tags)
        neu = np.isin(tags, list(quad.neumann_tags))
        dmask = ~neu
        if np.any(dmask):
            p, w, n = pts[dmask], wts[dmask], nrm[dmask]
            S, Gx, Gy, val, dn = _surface_terms(p, w, n, level.bounds[c], eta, lam[c])
            E[c, 0:4, 0:4] += S
            E[c, 4:8, 4:8] += S
            E[c, 0:4, 8:12] += Gx
            E[c, 4:8, 8:12] += Gy
            E[c, 8:12, 0:4] += Gx.T
            E[c, 8:12, 4:8] += Gy.T
            wx = np.zeros(len(w))
            wy = np.zeros(len(w))
            dtags = tags[dmask]
            for tag in np.unique(dtags):
                fn = params.dirichlet.get(tag)
                if fn is None:
                    continue
                sel = dtags == tag
                vx, vy = fn(p[sel, 0], p[sel, 1])
                wx[sel] = vx
                wy[sel] = vy
            coef = (-eta * dn + lam[c] * val) * w[:, None]
            F[c, 0:4] += coef.T @ wx
            F[c, 4:8] += coef.T @ wy
            F[c, 8:12] += (val * w[:, None]).T @ (n[:, 0] * wx + n[:, 1] * wy)
        if np.any(neu):
            p, w = pts[neu], wts[neu]
            ntags = tags[neu]
            x0, x1, y0, _ = level.bounds[c]
            val, _, _ = _shape((p[:, 0] - x0) / (x1 - x0), (p[:, 1] - y0) / (x1 - x0))
            for tag in np.unique(ntags):
                fn = params.neumann.get(tag)
                if fn is None:
                    continue
                sel = ntags == tag
                hx, hy = fn(p[sel, 0], p[sel, 1])
                F[c, 0:4] += (val[sel] * w[sel, None]).T @ np.broadcast_to(hx, w[sel].shape)
                F[c, 4:8] += (val[sel] * w[sel, None]).T @ np.broadcast_to(hy, w[sel].shape)

    return _scatter(level, dm, E, F)


def _element_dofs(dm: DofMap, free_ids):
    """Global DoFs of the 12 element slots for free-node ids ``(..., 4)``."""
    ux, uy = dm.velocity(free_ids)
    return np.concatenate([ux, uy, dm.pressure(free_ids)], axis=-1)


def _scatter(level: GridLevel, dm: DofMap, E, F) -> SaddleOperator:
    ids, wts, valid = level.node_expansion()
    corners = level.corner_nodes
    hanging_cell = np.any(level.nodes.hanging[corners], axis=1)

    rows_l, cols_l, vals_l = [], [], []
    rhs = np.zeros(dm.n)
    rhs_idx, rhs_val = [], []

    plain = np.nonzero(~hanging_cell)[0]
    if len(plain):
        g = _element_dofs(dm, ids[corners[plain], 0])  # (k, 12)
        rows_l.append(np.repeat(g, 12, axis=1).ravel())
        cols_l.append(np.tile(g, (1, 12)).ravel())
        vals_l.append(E[plain].ravel())
        rhs_idx.append(g.ravel())
        rhs_val.append(F[plain].ravel())

    hang = np.nonzero(hanging_cell)[0]
    if len(hang):
        W = ids.shape[1]
        cid = ids[corners[hang]]  # (k, 4, W)
        cw = wts[corners[hang]]
        cv = valid[corners[hang]]
        # expanded slots: (k, 12, W)
        g = np.concatenate([2 * cid, 2 * cid + 1, dm.n_u + cid], axis=1)
        gw = np.concatenate([cw, cw, cw], axis=1)
        gv = np.concatenate([cv, cv, cv], axis=1)
        k = len(hang)
        r = np.broadcast_to(g[:, :, None, :, None], (k, 12, 12, W, W))
        c = np.broadcast_to(g[:, None, :, None, :], (k, 12, 12, W, W))
        v = E[hang][:, :, :, None, None] * (gw[:, :, None, :, None] * gw[:, None, :, None, :])
        ok = gv[:, :, None, :, None] & gv[:, None, :, None, :]
        rows_l.append(r[ok])
        cols_l.append(c[ok])
        vals_l.append(v[ok])
        fv = F[hang][:, :, None] * gw
        rhs_idx.append(g[gv])
        rhs_val.append(fv[gv])

    # element order is preserved: plain cells first, then hanging cells
    mat = SparseMatrix.from_coo(
        np.concatenate(rows_l), np.concatenate(cols_l), np.concatenate(vals_l), (dm.n, dm.n)
    )
    ridx = np.ascontiguousarray(np.concatenate(rhs_idx), dtype=np.int64)
    rval = np.ascontiguousarray(np.concatenate(rhs_val))
    kernels.ordered_scatter_add(rhs, ridx, rval)
    return SaddleOperator(mat, rhs, dm)


# ---------------------------------------------------------------------------
# operator application
# ---------------------------------------------------------------------------


def apply_operator(op: SaddleOperator, x, threads: int = 1) -> np.ndarray:
    return op.matrix.matvec(x, threads)


def residual(op: SaddleOperator, x, threads: int = 1):
    """``(r, ratio, relative)``: ``r = b - Lx``, ``ratio = |r| / |b|``.

    With ``b = 0`` the ratio falls back to ``|r|`` and ``relative`` is False.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (op.n,):
        raise ValueError(f"dimension mismatch: {x.shape} vs ({op.n},)")
    r = op.rhs - op.matrix.matvec(x, threads)
    nb = float(np.linalg.norm(op.rhs))
    nr = float(np.linalg.norm(r))
    if nb == 0.0:
        return r, nr, False
    return r, nr / nb, True


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------


def nodal_values(level: GridLevel, x) -> np.ndarray:
    """``(n_nodes, 3)`` array of ``(u_x, u_y, p)`` at every node, hanging ones interpolated."""
    dm = DofMap(level.n_free)
    free = np.stack([x[0 : dm.n_u : 2], x[1 : dm.n_u : 2], x[dm.n_u :]], axis=1)
    ids, wts, valid = level.node_expansion()
    return np.einsum("nw,nwf->nf", wts * valid, free[ids])


def velocity_l2(level: GridLevel, quad: CellQuadratures, x, exact=None, physical_only: bool = True) -> float:
    """L2 norm of ``u_h`` (or of ``u_h - exact``) over the quadrature points.

    Points with ``alpha < 1`` are skipped when ``physical_only``.
    """
    vals = nodal_values(level, x)
    off = quad.vol_offsets
    cell = np.repeat(np.arange(level.n_cells), np.diff(off))
    b = level.bounds[cell]
    h = b[:, 1] - b[:, 0]
    phi, _, _ = _shape((quad.vol_points[:, 0] - b[:, 0]) / h, (quad.vol_points[:, 1] - b[:, 2]) / h)
    cn = level.corner_nodes[cell]
    ux = np.einsum("pa,pa->p", phi, vals[cn, 0])
    uy = np.einsum("pa,pa->p", phi, vals[cn, 1])
    if exact is not None:
        ex, ey = exact(quad.vol_points[:, 0], quad.vol_points[:, 1])
        ux = ux - ex
        uy = uy - ey
    w = quad.vol_weights
    if physical_only:
        w = np.where(quad.vol_alphas == 1.0, w, 0.0)
    return float(np.sqrt(np.sum(w * (ux**2 + uy**2))))


def export_operator(op: SaddleOperator, level: GridLevel, matrix_path, dofs_path, rhs_path=None) -> None:
    """Matrix Market (coordinate, general, 1-based) plus a DoF sidecar CSV."""
    coo = op.matrix.to_scipy().tocoo()
    scipy.io.mmwrite(str(matrix_path), coo, field="real", symmetry="general")
    if rhs_path is not None:
        scipy.io.mmwrite(str(rhs_path), op.rhs[:, None], field="real")
    dm = op.dofmap
    coords = level.nodes.free_coords()
    names = np.array(["u_x", "u_y", "p"])
    dofs = np.arange(dm.n)
    node = dm.node_of(dofs)
    fld = dm.field_of(dofs)
    with open(dofs_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dof", "node", "x", "y", "field"])
        for d, k, f in zip(dofs, node, fld):
            w.writerow([int(d), int(k), repr(float(coords[k, 0])), repr(float(coords[k, 1])), names[f]])
