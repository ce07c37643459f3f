"""Experiment harness: channel benchmark, manufactured solutions, policy
timing, partition replication and CSV emission.

The functions here return plain rows and reports; :mod:`fcmg.cli` wraps
them into subcommands.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import multigrid as mg
from . import smoother as sm
from .assembly import (
    PhysicalParams,
    assemble,
    compute_quadratures,
    nodal_values,
    residual,
    velocity_l2,
)
from .config import RunConfig
from .geometry import CellClass, LevelSetDomain, channel_domain, unit_square_domain
from .mesh import Forest, make_level, refine_adaptive

__all__ = [
    "InflowProfile",
    "inflow_eval",
    "channel_geometry",
    "channel_problem",
    "build_channel_solver",
    "run_solve",
    "write_report_csv",
    "write_field_csv",
    "mms_exact",
    "mms_study",
    "policy_bench",
    "partition_check",
    "mesh_rows",
    "cut_cell_rows",
    "write_rows",
]

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# channel benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InflowProfile:
    """Parabolic inflow with peak ``u_bar`` across a channel of width ``H``."""

    u_bar: float = 0.3
    H: float = 0.41

    def __call__(self, x, y):
        return inflow_eval(self, y)


def inflow_eval(profile: InflowProfile, y):
    """``(u_x, u_y)`` of the inflow profile at heights ``y``.

    Heights outside ``[0, H]`` lie in the fictitious region and get zero.
    """
    y = np.asarray(y, dtype=float)
    H = profile.H
    outside = (y < 0.0) | (y > H)
    if np.any(outside):
        log.debug("inflow evaluated at %d heights outside [0, H]; clamped to 0", int(np.sum(outside)))
    ux = np.where(outside, 0.0, 4.0 * profile.u_bar * y * (H - y) / H**2)
    return ux, np.zeros_like(ux)


def channel_geometry(cfg: RunConfig) -> LevelSetDomain:
    g = cfg.geometry
    return channel_domain(
        g.length, g.height, (g.center_x, g.center_y), g.diameter, (g.box_x0, g.box_x1, g.box_y0, g.box_y1)
    )


def channel_problem(cfg: RunConfig, alpha_fict: float | None = None):
    """``(domain, fine forest, params)`` for the channel benchmark."""
    g, m, p = cfg.geometry, cfg.mesh, cfg.physics
    dom = channel_geometry(cfg)
    root = Forest.uniform(m.root_nx, m.root_ny, (g.box_x0, g.box_y0), m.root_size, level=m.base_level)
    fine = refine_adaptive(root, dom, m.r_max)
    fx, fy = p.force_x, p.force_y

    def force(x, y):
        x = np.asarray(x, dtype=float)
        return np.full_like(x, fx), np.full_like(x, fy)

    params = PhysicalParams(
        eta=p.eta,
        alpha_fict=p.alpha_fict if alpha_fict is None else alpha_fict,
        beta_n=p.beta_n,
        body_force=force,
        dirichlet={"inflow": InflowProfile(p.u_bar, g.height)},
    )
    return dom, fine, params


def build_channel_solver(cfg: RunConfig, alpha_fict: float | None = None) -> mg.Hierarchy:
    dom, fine, params = channel_problem(cfg, alpha_fict)
    m, s = cfg.mesh, cfg.solver
    return mg.build_hierarchy_solver(
        fine, dom, params, m.levels, s.policy, s.omega, s.nu1, s.nu2, s.threads,
        m.subdivision, m.gauss, m.surface_resolution, s.coarse_cap,
    )


def run_solve(cfg: RunConfig, h: mg.Hierarchy | None = None):
    """Build (unless given) and solve the channel; returns ``(x, report, hierarchy)``.

    With ``partitions > 1`` the serial run is repeated and the report config
    records whether every iterate matched bit for bit.
    """
    if h is None:
        h = build_channel_solver(cfg)
    s = cfg.solver
    meta = {"dofs": h.fine.op.n, "levels": len(h), "policy": s.policy, "partitions": s.partitions}
    mg.set_partitions(h, s.partitions)
    x, rep = mg.solve(h, target=s.target, max_iter=s.max_iter, config=meta)
    if s.partitions > 1:
        mg.set_partitions(h, 1)
        _, ref = mg.solve(h, target=s.target, max_iter=s.max_iter)
        rep.config["partition_match"] = ref.checksums == rep.checksums
        mg.set_partitions(h, s.partitions)
    return x, rep, h


def write_report_csv(report: mg.SolveReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "relative_residual", "checksum"])
        for i, (r, c) in enumerate(zip(report.ratios, report.checksums)):
            w.writerow([i, repr(float(r)), c])


def write_field_csv(h: mg.Hierarchy, domain: LevelSetDomain, x, path) -> None:
    """Nodal solution with hanging nodes reconstructed from their constraints."""
    lev = h.fine.mesh
    vals = nodal_values(lev, x)
    xy = lev.nodes.coords
    phys = domain(xy[:, 0], xy[:, 1]) < 0.0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "x", "y", "u_x", "u_y", "p", "region", "hanging"])
        for k in range(len(xy)):
            w.writerow([
                k, repr(float(xy[k, 0])), repr(float(xy[k, 1])),
                repr(float(vals[k, 0])), repr(float(vals[k, 1])), repr(float(vals[k, 2])),
                "physical" if phys[k] else "fictitious", int(lev.nodes.hanging[k]),
            ])


# ---------------------------------------------------------------------------
# manufactured solution on the fitted unit square
# ---------------------------------------------------------------------------


def mms_exact(scale: float = 1.0, eta: float = 1.0):
    """``(u, p, f)`` callables with ``u`` divergence free and ``p`` of zero mean."""
    pi = np.pi

    def u(x, y):
        return scale * np.sin(pi * x) * np.sin(pi * y), scale * np.cos(pi * x) * np.cos(pi * y)

    def p(x, y):
        return np.sin(pi * x) * np.cos(pi * y)

    def f(x, y):
        ux, uy = u(x, y)
        fx = 2 * pi**2 * eta * ux + pi * np.cos(pi * x) * np.cos(pi * y)
        fy = 2 * pi**2 * eta * uy - pi * np.sin(pi * x) * np.sin(pi * y)
        return fx, fy

    return u, p, f


def mms_operator(level: int, cfg: RunConfig | None = None, eta: float = 1.0):
    """Fitted unit square at uniform ``level``: ``(grid, quadratures, operator, exact u)``."""
    cfg = cfg or RunConfig()
    dom = unit_square_domain()
    u, _, f = mms_exact(eta=eta)
    grid = make_level(Forest.uniform(1, 1, (0.0, 0.0), 1.0, level=level))
    quad = compute_quadratures(grid, dom, cfg.mesh.subdivision, cfg.mesh.gauss, cfg.mesh.surface_resolution)
    prm = PhysicalParams(eta=eta, beta_n=cfg.physics.beta_n, body_force=f, dirichlet={"dirichlet": u})
    return grid, quad, assemble(grid, quad, prm), u


def _solve_mean_zero(op):
    """Direct solve with a Lagrange multiplier pinning the pressure mean."""
    A = op.matrix.to_scipy()
    dm = op.dofmap
    c = np.zeros(dm.n)
    c[dm.n_u :] = 1.0
    K = scipy.sparse.bmat([[A, scipy.sparse.csr_matrix(c[:, None])], [scipy.sparse.csr_matrix(c[None, :]), None]])
    return scipy.sparse.linalg.spsolve(K.tocsc(), np.r_[op.rhs, 0.0])[: dm.n]


def interpolate_exact(grid, u, p=None) -> np.ndarray:
    """DoF vector of the nodal interpolant of ``(u, p)``."""
    xy = grid.nodes.free_coords()
    ux, uy = u(xy[:, 0], xy[:, 1])
    out = np.zeros(3 * len(xy))
    out[0 : 2 * len(xy) : 2] = ux
    out[1 : 2 * len(xy) : 2] = uy
    if p is not None:
        out[2 * len(xy) :] = p(xy[:, 0], xy[:, 1])
    return out


def mms_study(cfg: RunConfig | None = None, levels=None) -> list[dict]:
    """Rows ``level, h, dofs, error, rate`` with ``rate`` from the previous row."""
    cfg = cfg or RunConfig()
    levels = cfg.mms_levels() if levels is None else list(levels)
    rows = []
    for r in levels:
        grid, quad, op, u = mms_operator(r, cfg)
        x = _solve_mean_zero(op)
        err = velocity_l2(grid, quad, x, exact=u)
        row = {"level": r, "h": 1.0 / 2**r, "dofs": op.n, "error": err, "rate": float("nan")}
        if rows:
            prev = rows[-1]
            row["rate"] = float(np.log(prev["error"] / err) / np.log(prev["h"] / row["h"]))
        rows.append(row)
    return rows


def mms_initial_residual(level: int, cfg: RunConfig | None = None) -> float:
    """Relative residual of the exact interpolant."""
    _, p, _ = mms_exact()
    grid, _, op, u = mms_operator(level, cfg)
    return residual(op, interpolate_exact(grid, u, p))[1]


# ---------------------------------------------------------------------------
# smoother cache policies
# ---------------------------------------------------------------------------


def policy_bench(cfg: RunConfig, h: mg.Hierarchy | None = None, seed: int = 0) -> list[dict]:
    """Setup time, median per-sweep time and cache bytes per policy on the fine level.

    A sweep is one smoother application to a fixed residual.  The median is
    taken over ``repeats`` batches of ``sweeps`` sweeps.
    """
    if h is None:
        h = build_channel_solver(cfg)
    op = h.fine.op
    subs = h.fine.smoother.subs
    r = np.random.default_rng(seed).standard_normal(op.n)
    st = cfg.study
    rows = []
    for policy in sm.POLICIES:
        t0 = time.perf_counter()
        state = sm.init(op, policy, cfg.solver.omega, cfg.solver.threads, subs=subs)
        setup = time.perf_counter() - t0
        sm.apply(state, r)  # warm-up
        batches = []
        for _ in range(st.repeats):
            t0 = time.perf_counter()
            for _ in range(st.sweeps):
                sm.apply(state, r)
            batches.append((time.perf_counter() - t0) / st.sweeps)
        mem = sm.memory_report(state)
        rows.append({
            "policy": policy,
            "setup_seconds": setup,
            "sweep_seconds": float(np.median(batches)),
            "cached_bytes": mem["cached_bytes"],
            "cached_matrix_bytes": mem["cached_matrix_bytes"],
            "cached_slab_bytes": mem["cached_slab_bytes"],
            "sweeps_timed": st.sweeps * st.repeats,
        })
    return rows


# ---------------------------------------------------------------------------
# partition replication
# ---------------------------------------------------------------------------


@dataclass
class PartitionResult:
    passed: bool
    iterations: dict  # ranks -> iteration count
    mismatch: tuple | None = None  # (ranks, first differing iteration)


def partition_check(cfg: RunConfig, ranks=None, h: mg.Hierarchy | None = None, negative_control: bool = False) -> PartitionResult:
    """Solve at every rank count and compare iterate checksums with ``P = 1``."""
    if h is None:
        h = build_channel_solver(cfg)
    ranks = cfg.ranks() if ranks is None else list(ranks)
    s = cfg.solver
    mg.set_partitions(h, 1)
    _, ref = mg.solve(h, target=s.target, max_iter=s.max_iter)
    iters = {1: ref.iterations}
    mismatch = None
    try:
        for P in ranks:
            if P == 1:
                continue
            mg.set_partitions(h, P, negative_control)
            _, rep = mg.solve(h, target=s.target, max_iter=s.max_iter)
            iters[P] = rep.iterations
            if mismatch is None and rep.checksums != ref.checksums:
                first = next(
                    (i for i, (a, b) in enumerate(zip(rep.checksums, ref.checksums)) if a != b),
                    min(len(rep.checksums), len(ref.checksums)),
                )
                mismatch = (P, first)
    finally:
        mg.set_partitions(h, 1)
    return PartitionResult(mismatch is None, iters, mismatch)


# ---------------------------------------------------------------------------
# mesh and cut-cell diagnostics
# ---------------------------------------------------------------------------


def mesh_rows(forest: Forest, domain: LevelSetDomain) -> list[dict]:
    leaves = forest.sorted_leaves()
    b = forest.bounds(leaves)
    cls = forest.classify(domain, leaves)
    return [
        {"id": c, "level": int(leaves[c, 0]), "x0": b[c, 0], "x1": b[c, 1], "y0": b[c, 2], "y1": b[c, 3],
         "class": CellClass(int(cls[c])).name.lower()}
        for c in range(len(leaves))
    ]


def cut_cell_rows(cfg: RunConfig) -> list[dict]:
    """Per cut cell of the fine channel grid: physical area fraction and arclength."""
    dom, fine, params = channel_problem(cfg)
    grid = make_level(fine)
    m = cfg.mesh
    quad = compute_quadratures(grid, dom, m.subdivision, m.gauss, m.surface_resolution, params.alpha_fict)
    cell = np.repeat(np.arange(grid.n_cells), np.diff(quad.vol_offsets))
    phys = np.bincount(cell, weights=np.where(quad.vol_alphas == 1.0, quad.vol_weights, 0.0), minlength=grid.n_cells)
    area = (grid.bounds[:, 1] - grid.bounds[:, 0]) * (grid.bounds[:, 3] - grid.bounds[:, 2])
    scell = np.repeat(np.arange(grid.n_cells), np.diff(quad.surf_offsets))
    arc = np.bincount(scell, weights=quad.surf_weights, minlength=grid.n_cells)
    rows = []
    for c in np.nonzero(quad.classes == CellClass.CUT)[0]:
        rows.append({
            "cell": int(c), "class": "cut", "area_fraction": float(phys[c] / area[c]),
            "arclength": float(arc[c]), "degenerate": int(quad.degenerate[c]),
        })
    return rows


def write_rows(rows: list[dict], path, columns=None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})
