import csv

import numpy as np
import pytest
import scipy.integrate
import sympy as sp

from conftest import small_config
from fcmg import bench
from fcmg import multigrid as mg


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- inflow -----------------------------------------------------------------------


@pytest.mark.parametrize(
    "y,expected",
    [(0.205, 0.3), (0.0, 0.0), (0.41, 0.0), (0.1025, 0.225), (-0.01, 0.0), (0.42, 0.0)],
)
def test_inflow_profile_values(y, expected):
    ux, uy = bench.inflow_eval(bench.InflowProfile(0.3, 0.41), y)
    assert float(ux) == pytest.approx(expected, abs=1e-15)
    assert float(uy) == 0.0


def test_inflow_flux_matches_mean_velocity():
    prof = bench.InflowProfile()
    flux, _ = scipy.integrate.quad(lambda y: float(prof(0.0, y)[0]), 0.0, 0.41)
    assert flux == pytest.approx(2.0 / 3.0 * 0.3 * 0.41, rel=1e-12)


# -- manufactured solution --------------------------------------------------------


def test_manufactured_solution_satisfies_stokes():
    x, y = sp.symbols("x y")
    eta = 0.7
    ux = sp.sin(sp.pi * x) * sp.sin(sp.pi * y)
    uy = sp.cos(sp.pi * x) * sp.cos(sp.pi * y)
    p = sp.sin(sp.pi * x) * sp.cos(sp.pi * y)
    assert sp.simplify(sp.diff(ux, x) + sp.diff(uy, y)) == 0
    assert sp.integrate(p, (x, 0, 1), (y, 0, 1)) == 0
    fx = -eta * (sp.diff(ux, x, 2) + sp.diff(ux, y, 2)) + sp.diff(p, x)
    fy = -eta * (sp.diff(uy, x, 2) + sp.diff(uy, y, 2)) + sp.diff(p, y)
    _, _, f = bench.mms_exact(eta=eta)
    pts = np.random.default_rng(3).random((25, 2))
    got = np.array(f(pts[:, 0], pts[:, 1])).T
    ref = np.array([[float(fx.subs({x: a, y: b})), float(fy.subs({x: a, y: b}))] for a, b in pts])
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


# -- channel driver -----------------------------------------------------------------


def test_run_solve_reports_partition_match(tmp_path):
    cfg = small_config(partitions=3)
    x, rep, h = bench.run_solve(cfg)
    assert rep.converged and rep.config["partition_match"] is True
    assert rep.config["dofs"] == h.fine.op.n
    bench.write_report_csv(rep, tmp_path / "r.csv")
    rows = read_csv(tmp_path / "r.csv")
    assert list(rows[0]) == ["iteration", "relative_residual", "checksum"]
    assert len(rows) == rep.iterations + 1 and float(rows[-1]["relative_residual"]) <= 1e-9
    dom = bench.channel_geometry(cfg)
    bench.write_field_csv(h, dom, x, tmp_path / "f.csv")
    field = read_csv(tmp_path / "f.csv")
    assert list(field[0]) == ["node", "x", "y", "u_x", "u_y", "p", "region", "hanging"]
    assert len(field) == len(h.fine.mesh.nodes.coords)
    assert {r["region"] for r in field} == {"physical", "fictitious"}


def test_policy_bench_rows(tiny_cfg, tiny_channel):
    cfg = tiny_cfg.copy()
    cfg.set("sweeps", 2)
    cfg.set("repeats", 2)
    rows = bench.policy_bench(cfg, tiny_channel)
    assert [r["policy"] for r in rows] == ["cache_none", "cache_matrix", "cache_inverse"]
    by = {r["policy"]: r for r in rows}
    assert by["cache_none"]["cached_bytes"] == 0
    assert by["cache_matrix"]["cached_bytes"] > by["cache_inverse"]["cached_bytes"] > 0
    assert all(r["sweeps_timed"] == 4 and r["sweep_seconds"] > 0 for r in rows)


def test_partition_check_passes_and_negative_control_fails(tiny_cfg):
    h = bench.build_channel_solver(tiny_cfg)
    ok = bench.partition_check(tiny_cfg, [1, 2, 4, 8], h)
    assert ok.passed and ok.mismatch is None
    assert len(set(ok.iterations.values())) == 1
    bad = bench.partition_check(tiny_cfg, [1, 4], h, negative_control=True)
    assert not bad.passed and bad.mismatch[0] == 4 and bad.mismatch[1] >= 1
    assert h.partitions == 1


def test_mesh_and_cut_cell_rows(tiny_cfg):
    dom, fine, _ = bench.channel_problem(tiny_cfg)
    rows = bench.mesh_rows(fine, dom)
    assert len(rows) == len(fine.leaves)
    assert {r["class"] for r in rows} == {"inside", "outside", "cut"}
    area = sum((r["x1"] - r["x0"]) * (r["y1"] - r["y0"]) for r in rows)
    assert area == pytest.approx(5 * 0.45**2)
    cut = bench.cut_cell_rows(tiny_cfg)
    assert len(cut) == sum(r["class"] == "cut" for r in rows)
    assert all(0.0 <= r["area_fraction"] <= 1.0 for r in cut)
    # boundary of the fluid inside the root grid: channel walls, inlet, outlet and cylinder
    perimeter = 2 * (2.2 + 0.41) + np.pi * 0.1
    assert sum(r["arclength"] for r in cut) == pytest.approx(perimeter, rel=1e-2)


def test_write_rows_uses_plain_float_text(tmp_path):
    bench.write_rows([{"a": np.float64(0.1), "b": 3}], tmp_path / "x.csv")
    assert (tmp_path / "x.csv").read_text().splitlines() == ["a,b", "0.1,3"]


def test_alpha_override_changes_only_fictitious_weights(tiny_cfg):
    a = bench.build_channel_solver(tiny_cfg)
    b = bench.build_channel_solver(tiny_cfg, alpha_fict=1e-8)
    qa, qb = a.fine.quad, b.fine.quad
    np.testing.assert_array_equal(qa.vol_alphas == 1.0, qb.vol_alphas == 1.0)
    assert set(np.unique(qb.vol_alphas)) == {1e-8, 1.0}
    assert isinstance(a, mg.Hierarchy)
