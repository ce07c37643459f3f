"""Implicit geometry and cut-cell integration.

The physical domain is described by a signed level-set function built from
simple primitives (half-planes, circles) combined with CSG operations.  The
sign convention is ``phi < 0`` inside the physical domain.  All primitives are
signed distances, so every combined function is 1-Lipschitz; the cell
classifier relies on that to certify cells that no sample lattice can resolve.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

__all__ = [
    "CellClass",
    "HalfPlane",
    "Circle",
    "FullSpace",
    "Union",
    "Intersection",
    "Complement",
    "LevelSetDomain",
    "VolumeQuadrature",
    "SurfaceQuadrature",
    "channel_domain",
    "unit_square_domain",
    "eval_levelset",
    "classify_cell",
    "classify_cells",
    "volume_quadrature",
    "volume_quadrature_many",
    "surface_quadrature",
    "surface_quadrature_many",
    "fitted_edge_quadrature",
    "gauss_rule",
]


class CellClass(IntEnum):
    INSIDE = 0
    OUTSIDE = 1
    CUT = 2


# ---------------------------------------------------------------------------
# level-set primitives and CSG
# ---------------------------------------------------------------------------


class _Node:
    def __call__(self, x, y):
        return self.value(np.asarray(x, dtype=float), np.asarray(y, dtype=float))

    def value(self, x, y):  # pragma: no cover - abstract
        raise NotImplementedError

    def active(self, x, y):
        """Return ``(value, tag)`` arrays, tag naming the primitive that wins."""
        raise NotImplementedError  # pragma: no cover


@dataclass(frozen=True)
class HalfPlane(_Node):
    """Signed distance ``a x + b y + c`` with ``(a, b)`` normalised on construction."""

    a: float
    b: float
    c: float
    tag: str = "wall"

    def __post_init__(self):
        nrm = float(np.hypot(self.a, self.b))
        if nrm == 0.0:
            raise ValueError("half-plane normal must be nonzero")
        object.__setattr__(self, "a", self.a / nrm)
        object.__setattr__(self, "b", self.b / nrm)
        object.__setattr__(self, "c", self.c / nrm)

    def value(self, x, y):
        return self.a * x + self.b * y + self.c

    def active(self, x, y):
        v = self.value(x, y)
        return v, np.full(v.shape, self.tag, dtype=object)


@dataclass(frozen=True)
class Circle(_Node):
    """Disk ``|x - c| <= r``; negative inside the disk."""

    cx: float
    cy: float
    r: float
    tag: str = "cylinder"

    def value(self, x, y):
        return np.hypot(x - self.cx, y - self.cy) - self.r

    def active(self, x, y):
        v = self.value(x, y)
        return v, np.full(v.shape, self.tag, dtype=object)


@dataclass(frozen=True)
class FullSpace(_Node):
    """Everything is physical; used for boundary-fitted runs."""

    depth: float = 1.0
    tag: str = "none"

    def value(self, x, y):
        return np.full(np.broadcast(x, y).shape, -abs(self.depth))

    def active(self, x, y):
        v = self.value(x, y)
        return v, np.full(v.shape, self.tag, dtype=object)


class Union(_Node):
    def __init__(self, *children: _Node):
        if not children:
            raise ValueError("union needs at least one operand")
        self.children = tuple(children)

    def value(self, x, y):
        out = self.children[0].value(x, y)
        for c in self.children[1:]:
            out = np.minimum(out, c.value(x, y))
        return out

    def active(self, x, y):
        out, tag = self.children[0].active(x, y)
        for c in self.children[1:]:
            v, t = c.active(x, y)
            take = v < out
            out = np.where(take, v, out)
            tag = np.where(take, t, tag)
        return out, tag


class Intersection(_Node):
    def __init__(self, *children: _Node):
        if not children:
            raise ValueError("intersection needs at least one operand")
        self.children = tuple(children)

    def value(self, x, y):
        out = self.children[0].value(x, y)
        for c in self.children[1:]:
            out = np.maximum(out, c.value(x, y))
        return out

    def active(self, x, y):
        out, tag = self.children[0].active(x, y)
        for c in self.children[1:]:
            v, t = c.active(x, y)
            take = v > out
            out = np.where(take, v, out)
            tag = np.where(take, t, tag)
        return out, tag


class Complement(_Node):
    def __init__(self, child: _Node):
        self.child = child

    def value(self, x, y):
        return -self.child.value(x, y)

    def active(self, x, y):
        v, t = self.child.active(x, y)
        return -v, t


@dataclass
class LevelSetDomain:
    """Physical domain embedded in an axis-aligned box.

    Parameters
    ----------
    root : CSG tree of signed-distance primitives.
    box : ``(xmin, xmax, ymin, ymax)`` of the embedding domain.
    neumann_tags : primitive tags whose zero level set is a natural
        (traction) boundary; every other tag is Dirichlet.
    fitted_sides : box sides (``left``, ``right``, ``bottom``, ``top``) that
        carry a boundary-fitted Dirichlet condition, mapped to a tag.
    """

    root: _Node
    box: tuple[float, float, float, float]
    neumann_tags: frozenset = frozenset()
    fitted_sides: dict = field(default_factory=dict)

    @property
    def diagonal(self) -> float:
        x0, x1, y0, y1 = self.box
        return float(np.hypot(x1 - x0, y1 - y0))

    @property
    def eps_geo(self) -> float:
        return 1e-12 * self.diagonal

    def __call__(self, x, y):
        return self.root(x, y)

    def tag_at(self, x, y):
        _, tag = self.root.active(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return tag


def channel_domain(
    length: float = 2.2,
    height: float = 0.41,
    center: tuple[float, float] = (0.2, 0.2),
    diameter: float = 0.1,
    box: tuple[float, float, float, float] = (-0.025, 2.225, -0.02, 0.43),
) -> LevelSetDomain:
    """Channel with a cylindrical obstacle; outflow at ``x = length`` is natural."""
    channel = Intersection(
        HalfPlane(-1.0, 0.0, 0.0, "inflow"),
        HalfPlane(1.0, 0.0, -length, "outflow"),
        HalfPlane(0.0, -1.0, 0.0, "wall"),
        HalfPlane(0.0, 1.0, -height, "wall"),
        Complement(Circle(center[0], center[1], 0.5 * diameter, "cylinder")),
    )
    return LevelSetDomain(channel, tuple(box), neumann_tags=frozenset({"outflow"}))


def unit_square_domain() -> LevelSetDomain:
    sides = {s: "dirichlet" for s in ("left", "right", "bottom", "top")}
    return LevelSetDomain(FullSpace(), (0.0, 1.0, 0.0, 1.0), fitted_sides=sides)


def eval_levelset(domain: LevelSetDomain, point) -> float:
    x, y = point
    return float(domain(x, y))


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def _lattice(bounds: np.ndarray, n: int):
    t = np.linspace(0.0, 1.0, n)
    x0, x1, y0, y1 = (bounds[:, i : i + 1, None] for i in range(4))
    xs = x0 + (x1 - x0) * t[None, None, :]
    ys = y0 + (y1 - y0) * t[None, :, None]
    return np.broadcast_arrays(xs, ys)


def _lattice_split(bounds: np.ndarray, n: int, mask: np.ndarray):
    """Sub-boxes ``(k, 4)`` of the lattice cells selected by ``mask`` (m, n-1, n-1)."""
    c, jj, ii = np.nonzero(mask)
    hx = (bounds[c, 1] - bounds[c, 0]) / (n - 1)
    hy = (bounds[c, 3] - bounds[c, 2]) / (n - 1)
    x0 = bounds[c, 0] + ii * hx
    y0 = bounds[c, 2] + jj * hy
    return c, np.stack([x0, x0 + hx, y0, y0 + hy], axis=1)


def _sample(domain, bounds: np.ndarray, n: int):
    """Lattice values plus cut flags and the uncertain sub-box mask."""
    m = len(bounds)
    xs, ys = _lattice(bounds, n)
    phi = domain(xs, ys)
    flat = phi.reshape(m, -1)
    a = np.abs(phi)
    cut = (a.reshape(m, -1).min(axis=1) < domain.eps_geo) | (
        (flat.min(axis=1) < 0.0) & (flat.max(axis=1) > 0.0)
    )
    hx = (bounds[:, 1] - bounds[:, 0]) / (n - 1)
    hy = (bounds[:, 3] - bounds[:, 2]) / (n - 1)
    half_diag = 0.5 * np.hypot(hx, hy)
    # every point of a sub-box lies within half a diagonal of one of its corners
    corner_min = np.minimum.reduce([a[:, :-1, :-1], a[:, 1:, :-1], a[:, :-1, 1:], a[:, 1:, 1:]])
    uncertain = corner_min <= half_diag[:, None, None]
    return flat, cut, uncertain


def classify_cells(domain: LevelSetDomain, bounds, samples: int = 3, max_depth: int = 12) -> np.ndarray:
    """Classify an ``(m, 4)`` array of cell bounds.

    A cell is ``CUT`` when its ``samples x samples`` lattice changes sign or
    touches the zero level set.  Lattice sub-boxes that the Lipschitz bound
    cannot certify sign-definite are re-sampled, breadth first, up to
    ``max_depth`` times.
    """
    if samples < 3:
        raise ValueError("need at least 3x3 samples per cell")
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    m = len(bounds)
    out = np.empty(m, dtype=np.int8)
    if m == 0:
        return out
    flat, cut, uncertain = _sample(domain, bounds, samples)
    out[:] = np.where(flat.max(axis=1) < 0.0, CellClass.INSIDE, CellClass.OUTSIDE)
    out[cut] = CellClass.CUT
    uncertain &= ~cut[:, None, None]
    owner, boxes = _lattice_split(bounds, samples, uncertain)
    for _ in range(max_depth):
        if len(boxes) == 0:
            break
        _, bcut, bunc = _sample(domain, boxes, 3)
        out[owner[bcut]] = CellClass.CUT
        live = out[owner] != CellClass.CUT
        bunc &= live[:, None, None]
        sub_owner, boxes = _lattice_split(boxes, 3, bunc)
        owner = owner[sub_owner]
    return out


def classify_cell(domain: LevelSetDomain, bounds, samples: int = 3) -> CellClass:
    return CellClass(int(classify_cells(domain, [bounds], samples)[0]))


# ---------------------------------------------------------------------------
# volume quadrature
# ---------------------------------------------------------------------------


def gauss_rule(q: int):
    """Tensor Gauss-Legendre rule on the unit square: ``(xi, eta, w)``."""
    t, w = np.polynomial.legendre.leggauss(q)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    xi, eta = np.meshgrid(t, t, indexing="xy")
    ww = np.outer(w, w)
    return xi.ravel(), eta.ravel(), ww.ravel()


@dataclass
class VolumeQuadrature:
    points: np.ndarray  # (m, 2) physical coordinates
    weights: np.ndarray  # (m,)
    alphas: np.ndarray  # (m,)

    def physical_area(self) -> float:
        return float(self.weights[self.alphas == 1.0].sum())


def _gauss_points(sub: np.ndarray, q: int):
    xi, eta, w = gauss_rule(q)
    x0, x1, y0, y1 = (sub[:, i : i + 1] for i in range(4))
    px = x0 + (x1 - x0) * xi[None, :]
    py = y0 + (y1 - y0) * eta[None, :]
    pw = (x1 - x0) * (y1 - y0) * w[None, :]
    return px.ravel(), py.ravel(), pw.ravel()


def volume_quadrature_many(
    domain: LevelSetDomain,
    bounds,
    classes=None,
    k: int = 4,
    q: int = 2,
    alpha_fict: float = 1e-10,
):
    """Quadrature for many cells at once.

    Returns ``(offsets, points, weights, alphas)``; the rule of cell ``c`` is
    the slice ``offsets[c]:offsets[c + 1]``.  Cut cells are integrated on a
    quadtree of sub-cells refined towards the interface down to depth ``k``.
    """
    if k < 0 or q < 2:
        raise ValueError("need k >= 0 and q >= 2")
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    if classes is None:
        classes = classify_cells(domain, bounds)
    classes = np.asarray(classes)
    m = len(bounds)

    leaf_cells = [np.nonzero(classes != CellClass.CUT)[0]]
    leaf_bounds = [bounds[leaf_cells[0]]]
    leaf_cut = [np.zeros(len(leaf_cells[0]), dtype=bool)]

    active_cell = np.nonzero(classes == CellClass.CUT)[0]
    active = bounds[active_cell]
    for depth in range(k + 1):
        if len(active) == 0:
            break
        sub_cls = classify_cells(domain, active) if depth > 0 else np.full(len(active), CellClass.CUT)
        split = (sub_cls == CellClass.CUT) & (depth < k)
        keep = ~split
        leaf_cells.append(active_cell[keep])
        leaf_bounds.append(active[keep])
        leaf_cut.append(np.ones(int(keep.sum()), dtype=bool))
        s = active[split]
        xm = 0.5 * (s[:, 0] + s[:, 1])
        ym = 0.5 * (s[:, 2] + s[:, 3])
        kids = np.stack(
            [
                np.stack([s[:, 0], xm, s[:, 2], ym], axis=1),
                np.stack([xm, s[:, 1], s[:, 2], ym], axis=1),
                np.stack([s[:, 0], xm, ym, s[:, 3]], axis=1),
                np.stack([xm, s[:, 1], ym, s[:, 3]], axis=1),
            ],
            axis=1,
        )
        active = kids.reshape(-1, 4)
        active_cell = np.repeat(active_cell[split], 4)

    cells = np.concatenate(leaf_cells)
    sub = np.concatenate(leaf_bounds)
    is_cut = np.concatenate(leaf_cut)
    order = np.argsort(cells, kind="stable")
    cells, sub, is_cut = cells[order], sub[order], is_cut[order]

    npts = q * q
    px, py, pw = _gauss_points(sub, q)
    alphas = np.ones(len(px))
    cell_of_pt = np.repeat(cells, npts)
    uniform = np.repeat(~is_cut, npts)
    outside_cell = classes[cell_of_pt] == CellClass.OUTSIDE
    alphas[uniform & outside_cell] = alpha_fict
    cut_pts = ~uniform
    phi = domain(px[cut_pts], py[cut_pts])
    alphas[cut_pts] = np.where(phi < 0.0, 1.0, alpha_fict)

    counts = np.bincount(cells, minlength=m) * npts
    offsets = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, np.stack([px, py], axis=1), pw, alphas


def volume_quadrature(domain, bounds, k: int = 4, q: int = 2, alpha_fict: float = 1e-10) -> VolumeQuadrature:
    _, pts, w, a = volume_quadrature_many(domain, [bounds], None, k, q, alpha_fict)
    return VolumeQuadrature(pts, w, a)


# ---------------------------------------------------------------------------
# surface quadrature
# ---------------------------------------------------------------------------


@dataclass
class SurfaceQuadrature:
    points: np.ndarray  # (m, 2) segment midpoints
    weights: np.ndarray  # (m,) segment lengths
    normals: np.ndarray  # (m, 2) unit, pointing out of the physical domain
    tags: np.ndarray  # (m,) boundary tag per segment
    degenerate: bool = False

    @property
    def arclength(self) -> float:
        return float(self.weights.sum())


def _bisect(domain, xa, ya, xb, yb, fa, tol):
    """Root of phi on segments a->b, given the sign at ``a``; vectorised."""
    lo = np.zeros(len(xa))
    hi = np.ones(len(xa))
    span = np.hypot(xb - xa, yb - ya)
    neg_a = fa < 0.0
    steps = int(np.ceil(np.log2(max(span.max(initial=0.0), tol) / tol))) + 1 if len(xa) else 0
    for _ in range(max(steps, 1)):
        mid = 0.5 * (lo + hi)
        fm = domain(xa + mid * (xb - xa), ya + mid * (yb - ya))
        same = (fm < 0.0) == neg_a
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    t = 0.5 * (lo + hi)
    return xa + t * (xb - xa), ya + t * (yb - ya)


def _normals(domain, px, py, step):
    gx = (domain(px + step, py) - domain(px - step, py)) / (2.0 * step)
    gy = (domain(px, py + step) - domain(px, py - step)) / (2.0 * step)
    nrm = np.hypot(gx, gy)
    nrm = np.where(nrm > 0.0, nrm, 1.0)
    return np.stack([gx / nrm, gy / nrm], axis=1)


def surface_quadrature_many(domain: LevelSetDomain, bounds, resolution: int = 8):
    """Marching-squares linearisation of the zero level set in many cells.

    Returns ``(offsets, points, weights, normals, tags, degenerate)`` where
    ``degenerate[c]`` flags a cell with no zero crossing on its sub-grid.
    """
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    m = len(bounds)
    n = resolution
    xs, ys = _lattice(bounds, n + 1)  # (m, n+1, n+1), index [c, j, i]
    phi = domain(xs, ys)
    neg = phi < 0.0
    size = np.maximum(bounds[:, 1] - bounds[:, 0], bounds[:, 3] - bounds[:, 2])

    # edge crossing points: horizontal edges [c, j, i] between (j,i)-(j,i+1),
    # vertical edges [c, j, i] between (j,i)-(j+1,i)
    def crossings(sl_a, sl_b):
        mask = neg[sl_a] != neg[sl_b]
        c_idx = np.nonzero(mask)
        xa, ya, fa = xs[sl_a][c_idx], ys[sl_a][c_idx], phi[sl_a][c_idx]
        xb, yb = xs[sl_b][c_idx], ys[sl_b][c_idx]
        tol = 1e-12 * size[c_idx[0]]
        px, py = _bisect(domain, xa, ya, xb, yb, fa, tol.min(initial=1.0))
        ex = np.full(mask.shape, np.nan)
        ey = np.full(mask.shape, np.nan)
        ex[c_idx] = px
        ey[c_idx] = py
        return mask, ex, ey

    hmask, hx, hy = crossings((slice(None), slice(None), slice(0, n)), (slice(None), slice(None), slice(1, n + 1)))
    vmask, vx, vy = crossings((slice(None), slice(0, n), slice(None)), (slice(None), slice(1, n + 1), slice(None)))

    # per square edges: 0 bottom, 1 right, 2 top, 3 left
    emask = np.stack([hmask[:, :n, :], vmask[:, :, 1:], hmask[:, 1:, :], vmask[:, :, :n]], axis=-1)
    ex = np.stack([hx[:, :n, :], vx[:, :, 1:], hx[:, 1:, :], vx[:, :, :n]], axis=-1)
    ey = np.stack([hy[:, :n, :], vy[:, :, 1:], hy[:, 1:, :], vy[:, :, :n]], axis=-1)
    count = emask.sum(axis=-1)

    segs_cell, segs_a, segs_b = [], [], []
    two = np.nonzero(count == 2)
    if len(two[0]):
        em = emask[two]
        first = np.argmax(em, axis=1)
        second = 3 - np.argmax(em[:, ::-1], axis=1)
        pts_x, pts_y = ex[two], ey[two]
        r = np.arange(len(first))
        segs_cell.append(two[0])
        segs_a.append(np.stack([pts_x[r, first], pts_y[r, first]], axis=1))
        segs_b.append(np.stack([pts_x[r, second], pts_y[r, second]], axis=1))
    four = np.nonzero(count == 4)
    if len(four[0]):
        c, j, i = four
        cx = 0.5 * (xs[c, j, i] + xs[c, j, i + 1])
        cy = 0.5 * (ys[c, j, i] + ys[c, j + 1, i])
        center_neg = domain(cx, cy) < 0.0
        joined = center_neg == neg[c, j, i]  # centre shares the sign of corners 00/11
        px, py = ex[four], ey[four]
        pairs_a = np.where(joined[:, None], [[0, 2]], [[0, 1]])
        pairs_b = np.where(joined[:, None], [[1, 3]], [[3, 2]])
        r = np.arange(len(c))
        for s in range(2):
            a, b = pairs_a[:, s], pairs_b[:, s]
            segs_cell.append(c)
            segs_a.append(np.stack([px[r, a], py[r, a]], axis=1))
            segs_b.append(np.stack([px[r, b], py[r, b]], axis=1))

    if segs_cell:
        cell = np.concatenate(segs_cell)
        pa = np.concatenate(segs_a)
        pb = np.concatenate(segs_b)
    else:
        cell = np.zeros(0, dtype=np.int64)
        pa = pb = np.zeros((0, 2))
    length = np.hypot(*(pb - pa).T)
    keep = length > 0.0
    cell, pa, pb, length = cell[keep], pa[keep], pb[keep], length[keep]
    order = np.argsort(cell, kind="stable")
    cell, pa, pb, length = cell[order], pa[order], pb[order], length[order]
    mid = 0.5 * (pa + pb)
    step = 1e-6 * size[cell]
    normals = _normals(domain, mid[:, 0], mid[:, 1], step) if len(cell) else np.zeros((0, 2))
    tags = domain.tag_at(mid[:, 0], mid[:, 1]) if len(cell) else np.zeros(0, dtype=object)
    counts = np.bincount(cell, minlength=m)
    offsets = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, mid, length, normals, np.asarray(tags, dtype=object), counts == 0


def surface_quadrature(domain, bounds, resolution: int = 8) -> SurfaceQuadrature:
    _, pts, w, nrm, tags, degenerate = surface_quadrature_many(domain, [bounds], resolution)
    return SurfaceQuadrature(pts, w, nrm, tags, bool(degenerate[0]))


_SIDES = {
    "left": (0, (-1.0, 0.0)),
    "right": (1, (1.0, 0.0)),
    "bottom": (2, (0.0, -1.0)),
    "top": (3, (0.0, 1.0)),
}


def fitted_edge_quadrature(domain: LevelSetDomain, bounds, q: int = 2) -> SurfaceQuadrature:
    """Gauss rule on the cell edges lying on fitted sides of the embedding box."""
    x0, x1, y0, y1 = bounds
    bx = domain.box
    t, w = np.polynomial.legendre.leggauss(q)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    pts, wts, nrms, tags = [], [], [], []
    tol = domain.eps_geo
    for side, tag in domain.fitted_sides.items():
        idx, n = _SIDES[side]
        coord = (x0, x1, y0, y1)[idx]
        if abs(coord - bx[idx]) > tol:
            continue
        if idx < 2:
            p = np.stack([np.full(q, coord), y0 + (y1 - y0) * t], axis=1)
            ww = (y1 - y0) * w
        else:
            p = np.stack([x0 + (x1 - x0) * t, np.full(q, coord)], axis=1)
            ww = (x1 - x0) * w
        pts.append(p)
        wts.append(ww)
        nrms.append(np.tile(n, (q, 1)))
        tags.extend([tag] * q)
    if not pts:
        return SurfaceQuadrature(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)), np.zeros(0, dtype=object))
    return SurfaceQuadrature(
        np.concatenate(pts), np.concatenate(wts), np.concatenate(nrms), np.array(tags, dtype=object)
    )
