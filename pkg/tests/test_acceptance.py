"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed when the test runs and again in the session summary.
"""

import numpy as np
import pytest

from conftest import record_criterion, small_config, uniform_patch
from fcmg import bench
from fcmg import multigrid as mg
from fcmg import smoother as sm
from fcmg.assembly import velocity_l2
from fcmg.geometry import CellClass, Circle, Complement, LevelSetDomain
from fcmg.mesh import Forest, make_level

# (base level, r_max, hierarchy depth): coarse grid fixed, fine level 3, 4, 5 above it
FAMILY = [(5, 6, 3), (6, 7, 4), (7, 8, 5)]
MIDDLE = FAMILY[1]


@pytest.fixture(scope="module")
def middle():
    cfg = small_config(*MIDDLE)
    return cfg, bench.build_channel_solver(cfg)


# -- 1 ------------------------------------------------------------------------------


def test_criterion_1_iteration_counts_bounded():
    runs = []
    for base, r_max, L in FAMILY:
        cfg = small_config(base, r_max, L, policy="cache_inverse")
        h = bench.build_channel_solver(cfg)
        _, rep = mg.solve(h, target=1e-9, max_iter=100)
        runs.append((h.fine.op.n, rep.iterations, rep.ratios[-1], rep.converged))
        del h
    converged = all(r[3] for r in runs)
    bounded = all(r[1] <= 30 for r in runs)
    non_increasing = runs[2][1] <= runs[1][1]
    detail = "; ".join(f"dofs={n} iterations={it} ratio={rt:.2e}" for n, it, rt, _ in runs)
    ok = converged and bounded and non_increasing
    record_criterion(1, ok, f"{detail}; converged={converged} bounded={bounded} non_increasing={non_increasing}")
    assert converged and bounded
    assert non_increasing, f"iterations grow from the middle to the finest grid: {[r[1] for r in runs]}"


# -- 2 ------------------------------------------------------------------------------


def test_criterion_2_cache_policies_equivalent(middle):
    cfg, h = middle
    reps = {}
    try:
        for policy in sm.POLICIES:
            mg.set_policy(h, policy)
            _, reps[policy] = mg.solve(h, target=1e-9, max_iter=100)
    finally:
        mg.set_policy(h, "cache_inverse")
    ref = np.array(reps["cache_inverse"].ratios)
    its = {p: r.iterations for p, r in reps.items()}
    same_its = len(set(its.values())) == 1
    dev = max(
        float(np.max(np.abs(np.array(r.ratios) - ref) / ref)) if len(r.ratios) == len(ref) else np.inf
        for r in reps.values()
    )
    ok = same_its and dev <= 1e-12
    record_criterion(2, ok, f"iterations={its} max relative ratio deviation={dev:.1e}")
    assert same_its and dev <= 1e-12


# -- 3 ------------------------------------------------------------------------------


def test_criterion_3_policy_runtime_ordering(middle):
    cfg, h = middle
    rows = {r["policy"]: r for r in bench.policy_bench(cfg, h)}
    t = {p: rows[p]["sweep_seconds"] for p in sm.POLICIES}
    order = t["cache_inverse"] < t["cache_matrix"] < t["cache_none"]
    mem = rows["cache_matrix"]["cached_matrix_bytes"] > rows["cache_inverse"]["cached_slab_bytes"]
    detail = (
        ", ".join(f"{p} {t[p] * 1e3:.2f} ms" for p in sm.POLICIES)
        + f"; matrix bytes {rows['cache_matrix']['cached_matrix_bytes']} vs slab bytes {rows['cache_inverse']['cached_slab_bytes']}"
    )
    record_criterion(3, order and mem, detail)
    assert order and mem


# -- 4 ------------------------------------------------------------------------------


def test_criterion_4_exact_parallel_replication(middle):
    cfg, h = middle
    good = bench.partition_check(cfg, [1, 2, 4, 8], h)
    bad = bench.partition_check(cfg, [1, 4], h, negative_control=True)
    ok = good.passed and not bad.passed
    record_criterion(
        4, ok, f"iterations by ranks {good.iterations}; negative control mismatch (ranks, iteration)={bad.mismatch}"
    )
    assert good.passed
    assert not bad.passed


# -- 5 ------------------------------------------------------------------------------


def _cut_patch():
    dom = LevelSetDomain(Complement(Circle(1.5, 1.5, 0.6)), (0.0, 3.0, 0.0, 3.0))
    grid = make_level(Forest.uniform(3, 3, (0.0, 0.0), 1.0))
    from fcmg.assembly import PhysicalParams, assemble, compute_quadratures

    return assemble(grid, compute_quadratures(grid, dom), PhysicalParams(eta=1e-3))


def test_criterion_5_smoother_matches_dense_formula():
    worst = 0.0
    for op in (uniform_patch(3)[1], _cut_patch()):
        subs = sm.build_subdomains(op)
        D = op.matrix.todense()
        S = np.zeros_like(D)
        for i in range(len(subs)):
            I = subs.input_set(i)
            Rt = np.zeros((3, len(I)))
            Rt[np.arange(3), subs.out_pos[i]] = 1.0
            S[np.ix_(subs.out_dofs[i], I)] += 0.8 * Rt @ np.linalg.inv(D[np.ix_(I, I)])
        rng = np.random.default_rng(11)
        for policy in sm.POLICIES:
            state = sm.init(op, policy, 0.8, subs=subs)
            for _ in range(20):
                r = rng.standard_normal(op.n)
                ref = S @ r
                worst = max(worst, float(np.linalg.norm(sm.apply(state, r) - ref) / np.linalg.norm(ref)))
    ok = worst <= 1e-12
    record_criterion(5, ok, f"3x3-cell meshes (uniform, cut), 20 residuals per policy, worst relative error {worst:.1e}")
    assert ok


# -- 6 ------------------------------------------------------------------------------


def test_criterion_6_discretization_verification(middle):
    _, h = middle
    rows = bench.mms_study(levels=[2, 3])
    rate = rows[1]["rate"]
    sym, c1 = 0.0, 0.0
    for lev in h.levels:
        L = lev.op.matrix.to_scipy()
        sym = max(sym, abs(L - L.T).max() / abs(L).max())
        C = lev.op.blocks()[3]
        c1 = max(c1, float(np.abs(C @ np.ones(C.shape[0])).max() / abs(C).max()))
    q = h.fine.quad
    grid = h.fine.mesh
    cut = np.nonzero(q.classes == CellClass.CUT)[0]
    sums = np.add.reduceat(q.vol_weights, q.vol_offsets[:-1])
    area = (grid.bounds[:, 1] - grid.bounds[:, 0]) * (grid.bounds[:, 3] - grid.bounds[:, 2])
    pou = float(np.max(np.abs(sums[cut] - area[cut]) / area[cut]))
    arc = float(q.surf_weights[q.surf_tags == "cylinder"].sum())
    arc_err = abs(arc - np.pi * 0.1) / (np.pi * 0.1)
    ok = rate >= 1.8 and sym <= 1e-12 and c1 <= 1e-12 and pou <= 1e-12 and arc_err <= 0.01
    record_criterion(
        6, ok,
        f"mms rate 2->3 {rate:.3f}; symmetry {sym:.1e}; C*1 {c1:.1e}; partition of unity {pou:.1e}; "
        f"cylinder arclength error {arc_err:.2e}",
    )
    assert rate >= 1.8
    assert sym <= 1e-12 and c1 <= 1e-12
    assert pou <= 1e-12 and arc_err <= 0.01


# -- 7 ------------------------------------------------------------------------------


def test_criterion_7_subdomain_structure():
    grid, op = uniform_patch(6)
    subs = sm.build_subdomains(op)
    n, n_u = grid.n_free, op.dofmap.n_u
    adj = np.zeros((n, n), dtype=bool)
    for c in grid.corner_nodes:
        adj[np.ix_(c, c)] = True
    xy = grid.nodes.free_coords()
    interior = np.nonzero((xy[:, 0] >= 2) & (xy[:, 0] <= 4) & (xy[:, 1] >= 2) & (xy[:, 1] <= 4))[0]
    sizes, match = set(), True
    for i in interior:
        pres = np.nonzero(adj[i])[0]
        vel = np.nonzero(adj[pres].any(axis=0))[0]
        oracle = np.concatenate([np.sort(np.r_[2 * vel, 2 * vel + 1]), n_u + pres])
        match &= np.array_equal(subs.input_set(i), oracle)
        sizes.add(len(oracle))
    outs = {len(o) for o in subs.out_dofs[interior]}
    ok = match and sizes == {59} and outs == {3}
    record_criterion(7, ok, f"interior input sizes {sorted(sizes)}, output sizes {sorted(outs)}, oracle match={match}")
    assert ok


# -- 8 ------------------------------------------------------------------------------


def test_criterion_8_fictitious_insensitivity(middle):
    cfg, h = middle
    norms = {}
    for alpha, hier in ((1e-10, h), (1e-8, bench.build_channel_solver(cfg, alpha_fict=1e-8))):
        x, rep = mg.solve(hier, target=1e-9, max_iter=100)
        assert rep.converged
        norms[alpha] = velocity_l2(hier.fine.mesh, hier.fine.quad, x)
    rel = abs(norms[1e-10] - norms[1e-8]) / norms[1e-10]
    ok = rel < 1e-4
    record_criterion(8, ok, f"physical velocity L2 {norms[1e-10]:.10f} vs {norms[1e-8]:.10f}, relative change {rel:.1e}")
    assert ok
