"""Quadtree background mesh.

Leaves are stored as ``(level, i, j)`` with ``i, j`` global cell indices at
that level, so root cell ``(0, i, j)`` covers ``[x0 + i*s, x0 + (i+1)*s]``.
Node positions are kept as exact integers on a lattice of ``2**MAX_LEVEL``
units per root cell, which makes hanging-node detection and nested point
location exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CellClass, LevelSetDomain, classify_cells

__all__ = [
    "MAX_LEVEL",
    "Forest",
    "NodeTable",
    "ConstraintMap",
    "GridLevel",
    "GridHierarchy",
    "refine_adaptive",
    "refine_uniform",
    "balance_2to1",
    "is_balanced",
    "coarsen_level",
    "build_hierarchy",
    "enumerate_dofs",
    "make_level",
    "morton_code",
]

MAX_LEVEL = 20
_DIRS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def morton_code(i, j, bits: int = MAX_LEVEL) -> np.ndarray:
    """Interleave the bits of ``i`` (even positions) and ``j`` (odd positions)."""
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    code = np.zeros(np.broadcast(i, j).shape, dtype=np.int64)
    for b in range(bits):
        code |= ((i >> b) & 1) << (2 * b)
        code |= ((j >> b) & 1) << (2 * b + 1)
    return code


@dataclass
class Forest:
    """Forest of quadtrees over an ``nx x ny`` grid of square root cells."""

    nx: int
    ny: int
    origin: tuple[float, float]
    size: float
    leaves: set = field(default_factory=set)
    classes: dict = field(default_factory=dict)

    @classmethod
    def uniform(cls, nx: int, ny: int, origin, size: float, level: int = 0) -> "Forest":
        n = 1 << level
        leaves = {(level, i, j) for i in range(nx * n) for j in range(ny * n)}
        return cls(nx, ny, tuple(origin), float(size), leaves)

    def copy(self) -> "Forest":
        return Forest(self.nx, self.ny, self.origin, self.size, set(self.leaves), dict(self.classes))

    @property
    def max_level(self) -> int:
        return max(l for l, _, _ in self.leaves)

    @property
    def box(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return (x0, x0 + self.nx * self.size, y0, y0 + self.ny * self.size)

    def in_range(self, level: int, i: int, j: int) -> bool:
        n = 1 << level
        return 0 <= i < self.nx * n and 0 <= j < self.ny * n

    def sorted_leaves(self) -> np.ndarray:
        """Leaves as an ``(m, 3)`` int array in (root, z-order) order."""
        arr = np.array(sorted(self.leaves), dtype=np.int64).reshape(-1, 3)
        lev, i, j = arr.T
        shift = MAX_LEVEL - lev
        root = (j >> lev) * self.nx + (i >> lev)
        local_i = (i - ((i >> lev) << lev)) << shift
        local_j = (j - ((j >> lev) << lev)) << shift
        order = np.lexsort((lev, morton_code(local_i, local_j), root))
        return arr[order]

    def bounds(self, leaves: np.ndarray) -> np.ndarray:
        lev, i, j = np.asarray(leaves, dtype=np.int64).T
        h = self.size / (1 << lev).astype(float)
        x0 = self.origin[0] + i * h
        y0 = self.origin[1] + j * h
        return np.stack([x0, x0 + h, y0, y0 + h], axis=1)

    def classify(self, domain: LevelSetDomain, leaves) -> np.ndarray:
        leaves = [tuple(map(int, lf)) for lf in leaves]
        missing = [lf for lf in leaves if lf not in self.classes]
        if missing:
            cls = classify_cells(domain, self.bounds(np.array(missing, dtype=np.int64).reshape(-1, 3)))
            self.classes.update(zip(missing, (int(c) for c in cls)))
        return np.array([self.classes[lf] for lf in leaves], dtype=np.int8)

    def containing_leaf(self, level: int, i: int, j: int):
        """Leaf equal to or containing cell ``(level, i, j)``, or None if it is subdivided."""
        for lev in range(level, -1, -1):
            d = level - lev
            key = (lev, i >> d, j >> d)
            if key in self.leaves:
                return key
        return None

    def split(self, leaf) -> list:
        lev, i, j = leaf
        self.leaves.remove(leaf)
        kids = [(lev + 1, 2 * i + a, 2 * j + b) for b in (0, 1) for a in (0, 1)]
        self.leaves.update(kids)
        return kids

    def area(self) -> float:
        return float(sum(self.size**2 / 4.0**lev for lev, _, _ in self.leaves))


# ---------------------------------------------------------------------------
# refinement, balance, coarsening
# ---------------------------------------------------------------------------


def refine_uniform(forest: Forest, level: int) -> Forest:
    f = forest.copy()
    stack = [lf for lf in f.leaves if lf[0] < level]
    while stack:
        lf = stack.pop()
        stack.extend(k for k in f.split(lf) if k[0] < level)
    return f


def balance_2to1(forest: Forest) -> Forest:
    """Refine until edge-adjacent leaves differ by at most one level.

    Only refines, never coarsens, and is idempotent.
    """
    f = forest.copy()
    if not f.leaves:
        return f
    by_level: dict[int, set] = {}
    for lf in f.leaves:
        by_level.setdefault(lf[0], set()).add(lf)
    for lev in range(f.max_level, 1, -1):
        for leaf in sorted(by_level.get(lev, ())):
            if leaf not in f.leaves:
                continue
            _, i, j = leaf
            for di, dj in _DIRS:
                ni, nj = i + di, j + dj
                if not f.in_range(lev, ni, nj):
                    continue
                target = (lev - 1, ni >> 1, nj >> 1)
                host = f.containing_leaf(*target)
                while host is not None and host[0] < target[0]:
                    kids = f.split(host)
                    for k in kids:
                        by_level.setdefault(k[0], set()).add(k)
                    host = f.containing_leaf(*target)
    return f


def is_balanced(forest: Forest) -> bool:
    for lev, i, j in forest.leaves:
        for di, dj in _DIRS:
            ni, nj = i + di, j + dj
            if not forest.in_range(lev, ni, nj):
                continue
            host = forest.containing_leaf(lev, ni, nj)
            if host is not None and host[0] < lev - 1:
                return False
    return True


def refine_adaptive(forest: Forest, domain: LevelSetDomain, r_max: int) -> Forest:
    """Refine every cut leaf down to level ``r_max``, then 2:1 balance."""
    if r_max < 0:
        raise ValueError("r_max must be non-negative")
    f = forest.copy()
    while True:
        cand = [lf for lf in f.leaves if lf[0] < r_max]
        if not cand:
            break
        cand.sort()
        cls = f.classify(domain, cand)
        cut = [lf for lf, c in zip(cand, cls) if c == CellClass.CUT]
        if not cut:
            break
        for lf in cut:
            f.split(lf)
    return balance_2to1(f)


def coarsen_level(fine: Forest) -> Forest:
    """Immediate coarse grid: merge every sibling group at the finest level, then balance."""
    f = fine.copy()
    r_max = f.max_level
    if r_max == 0:
        raise ValueError("cannot coarsen root grid")
    for lev, i, j in [lf for lf in f.leaves if lf[0] == r_max]:
        parent = (lev - 1, i >> 1, j >> 1)
        if parent in f.leaves:
            continue
        for b in (0, 1):
            for a in (0, 1):
                f.leaves.discard((lev, 2 * parent[1] + a, 2 * parent[2] + b))
        f.leaves.add(parent)
    return balance_2to1(f)


# ---------------------------------------------------------------------------
# nodes, hanging-node constraints
# ---------------------------------------------------------------------------


@dataclass
class NodeTable:
    """All leaf vertices, ordered by ``(y, x)``; hanging nodes carry no DoFs."""

    keys: np.ndarray  # (n, 2) integer lattice coordinates (X, Y)
    coords: np.ndarray  # (n, 2)
    hanging: np.ndarray  # (n,) bool
    free_index: np.ndarray  # (n,) -1 for hanging nodes

    @property
    def n_nodes(self) -> int:
        return len(self.keys)

    @property
    def n_free(self) -> int:
        return int((~self.hanging).sum())

    def free_coords(self) -> np.ndarray:
        return self.coords[~self.hanging]


@dataclass
class ConstraintMap:
    """Hanging node id -> list of ``(free index, weight)``, closed under substitution."""

    entries: dict

    def __len__(self) -> int:
        return len(self.entries)


def _node_key(X, Y):
    return (np.asarray(Y, dtype=np.int64) << 32) | np.asarray(X, dtype=np.int64)


def enumerate_dofs(forest: Forest, leaves: np.ndarray | None = None):
    """Number the free nodes lexicographically and build closed constraints.

    Returns ``(NodeTable, ConstraintMap, corner_nodes)``; ``corner_nodes[c]``
    lists node ids of leaf ``c`` as (bottom-left, bottom-right, top-left,
    top-right).
    """
    if leaves is None:
        leaves = forest.sorted_leaves()
    lev, i, j = np.asarray(leaves, dtype=np.int64).T
    s = np.int64(1) << (MAX_LEVEL - lev)
    X0, Y0 = i * s, j * s
    cX = np.stack([X0, X0 + s, X0, X0 + s], axis=1)
    cY = np.stack([Y0, Y0, Y0 + s, Y0 + s], axis=1)
    ckey = _node_key(cX, cY)
    ukeys, inv = np.unique(ckey.ravel(), return_inverse=True)  # sorted by (Y, X)
    corner_nodes = inv.reshape(-1, 4)
    X = ukeys & ((np.int64(1) << 32) - 1)
    Y = ukeys >> 32
    unit = forest.size / float(1 << MAX_LEVEL)
    coords = np.stack([forest.origin[0] + X * unit, forest.origin[1] + Y * unit], axis=1)

    # edge midpoints with their endpoints: bottom, right, top, left
    h = s // 2
    mX = np.stack([X0 + h, X0 + s, X0 + h, X0], axis=1).ravel()
    mY = np.stack([Y0, Y0 + h, Y0 + s, Y0 + h], axis=1).ravel()
    aX = np.stack([X0, X0 + s, X0, X0], axis=1).ravel()
    aY = np.stack([Y0, Y0, Y0 + s, Y0], axis=1).ravel()
    bX = np.stack([X0 + s, X0 + s, X0 + s, X0], axis=1).ravel()
    bY = np.stack([Y0, Y0 + s, Y0 + s, Y0 + s], axis=1).ravel()
    mkey = _node_key(mX, mY)
    hit = np.isin(mkey, ukeys)
    mkey, akey, bkey = mkey[hit], _node_key(aX[hit], aY[hit]), _node_key(bX[hit], bY[hit])
    mkey, first = np.unique(mkey, return_index=True)
    hang_ids = np.searchsorted(ukeys, mkey)
    pa = np.searchsorted(ukeys, akey[first])
    pb = np.searchsorted(ukeys, bkey[first])

    n = len(ukeys)
    hanging = np.zeros(n, dtype=bool)
    hanging[hang_ids] = True
    free_index = np.full(n, -1, dtype=np.int64)
    free_index[~hanging] = np.arange(int((~hanging).sum()))

    raw = {int(hn): [(int(a), 0.5), (int(b), 0.5)] for hn, a, b in zip(hang_ids, pa, pb)}

    def expand(node, seen=()):
        if not hanging[node]:
            return {node: 1.0}
        if node in seen:
            raise RuntimeError("cyclic hanging-node constraints")
        out: dict[int, float] = {}
        for parent, w in raw[node]:
            for q, wq in expand(parent, seen + (node,)).items():
                out[q] = out.get(q, 0.0) + w * wq
        return out

    entries = {}
    for hn in sorted(raw):
        exp = expand(hn)
        entries[hn] = [(int(free_index[q]), w) for q, w in sorted(exp.items())]
    nodes = NodeTable(np.stack([X, Y], axis=1), coords, hanging, free_index)
    return nodes, ConstraintMap(entries), corner_nodes


@dataclass
class GridLevel:
    forest: Forest
    leaves: np.ndarray  # (m, 3)
    bounds: np.ndarray  # (m, 4)
    nodes: NodeTable
    constraints: ConstraintMap
    corner_nodes: np.ndarray  # (m, 4)

    @property
    def n_cells(self) -> int:
        return len(self.leaves)

    @property
    def n_free(self) -> int:
        return self.nodes.n_free

    def node_expansion(self, max_terms: int | None = None):
        """Per node: padded ``(free ids, weights, valid)`` arrays of its expansion."""
        n = self.nodes.n_nodes
        width = max([len(v) for v in self.constraints.entries.values()] + [1])
        if max_terms is not None:
            width = max(width, max_terms)
        ids = np.zeros((n, width), dtype=np.int64)
        wts = np.zeros((n, width))
        valid = np.zeros((n, width), dtype=bool)
        free = ~self.nodes.hanging
        ids[free, 0] = self.nodes.free_index[free]
        wts[free, 0] = 1.0
        valid[free, 0] = True
        for hn, lst in self.constraints.entries.items():
            for t, (q, w) in enumerate(lst):
                ids[hn, t] = q
                wts[hn, t] = w
                valid[hn, t] = True
        return ids, wts, valid

    def locate(self, keys: np.ndarray) -> np.ndarray:
        """Index of a leaf containing each lattice point ``(X, Y)``."""
        keys = np.asarray(keys, dtype=np.int64)
        X, Y = keys[:, 0], keys[:, 1]
        out = np.full(len(keys), -1, dtype=np.int64)
        lev, li, lj = self.leaves.T
        width = np.int64(self.forest.nx) << MAX_LEVEL
        height = np.int64(self.forest.ny) << MAX_LEVEL
        X = np.minimum(X, width - 1)
        Y = np.minimum(Y, height - 1)
        for level in np.unique(lev):
            sel = np.nonzero(lev == level)[0]
            code = (lj[sel] << 32) | li[sel]
            order = np.argsort(code)
            code_sorted = code[order]
            todo = np.nonzero(out < 0)[0]
            shift = MAX_LEVEL - int(level)
            q = ((Y[todo] >> shift) << 32) | (X[todo] >> shift)
            pos = np.searchsorted(code_sorted, q)
            pos = np.minimum(pos, len(code_sorted) - 1)
            found = code_sorted[pos] == q
            out[todo[found]] = sel[order[pos[found]]]
        if np.any(out < 0):
            raise RuntimeError("point outside the forest")
        return out


def make_level(forest: Forest) -> GridLevel:
    leaves = forest.sorted_leaves()
    nodes, cons, corners = enumerate_dofs(forest, leaves)
    return GridLevel(forest, leaves, forest.bounds(leaves), nodes, cons, corners)


@dataclass
class GridHierarchy:
    """Nested levels, index 0 coarsest; ``parent[l][c]`` maps fine leaf ``c`` of
    level ``l`` to the level ``l-1`` leaf that equals or contains it."""

    levels: list
    parent: list

    def __len__(self) -> int:
        return len(self.levels)


def build_hierarchy(fine: Forest, L: int) -> GridHierarchy:
    if L < 1:
        raise ValueError("hierarchy needs at least one level")
    forests = [fine]
    for _ in range(L - 1):
        forests.insert(0, coarsen_level(forests[0]))
    levels = [make_level(f) for f in forests]
    parent = [None]
    for lc, lf in zip(levels[:-1], levels[1:]):
        lev, i, j = lf.leaves.T
        s = np.int64(1) << (MAX_LEVEL - lev)
        centre = np.stack([i * s + s // 2, j * s + s // 2], axis=1)
        parent.append(lc.locate(centre))
    return GridHierarchy(levels, parent)
