"""Command line entry point.

Exit codes: 0 success, 2 verification failure (no convergence, low MMS
rate, partition mismatch), 1 any other error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import bench
from . import multigrid as mg
from .assembly import export_operator
from .config import ConfigError, RunConfig

__all__ = ["main", "build_parser", "load_config"]

EXIT_OK, EXIT_ERROR, EXIT_VERIFY = 0, 1, 2

COMMANDS = {
    "solve": "channel benchmark: multigrid solve, report and field CSV",
    "mms": "manufactured-solution convergence study on the fitted unit square",
    "policy-bench": "time the three smoother cache policies on the fine level",
    "partition-check": "bitwise iterate comparison across simulated rank counts",
    "mesh-dump": "CSV of fine-grid leaves (id, level, bounds, class)",
    "export-operator": "fine-level operator as Matrix Market plus DoF map CSV",
    "cut-cells": "CSV of cut-cell statistics (area fraction, arclength)",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file with [geometry] [mesh] [physics] [solver] [study] [output]")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    ov = common.add_argument_group("overrides (one flag per config key)")
    for key, (sec, typ) in RunConfig.keys().items():
        ov.add_argument(f"--{key}", dest=f"ov_{key}", metavar=typ.__name__.upper(), help=f"[{sec}] {key}")
    p = argparse.ArgumentParser(prog="fcmg", description="Finite cell Stokes multigrid benchmarks")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "partition-check":
            sp.add_argument("--negative-control", action="store_true", help="use rank-order partial sums (expected to fail)")
        if name == "solve":
            sp.add_argument("--no-field", action="store_true", help="skip the solution field CSV")
        if name in ("solve", "mms"):
            sp.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.read(args.config) if args.config else RunConfig()
    for key in RunConfig.keys():
        val = getattr(args, f"ov_{key}", None)
        if val is not None:
            cfg.set(key, val)
    cfg.validate()
    return cfg


def _out(cfg: RunConfig, name: str) -> Path:
    d = Path(cfg.output.directory)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def cmd_solve(cfg: RunConfig, args) -> int:
    dom = bench.channel_geometry(cfg)
    h = bench.build_channel_solver(cfg)
    x, rep, h = bench.run_solve(cfg, h)
    bench.write_report_csv(rep, _out(cfg, cfg.output.report))
    if not args.no_field:
        bench.write_field_csv(h, dom, x, _out(cfg, cfg.output.field))
    print(f"dofs={h.fine.op.n} levels={len(h)} " + rep.summary())
    ok = rep.converged
    if "partition_match" in rep.config:
        print(f"partitions={cfg.solver.partitions} bitwise_match_serial={rep.config['partition_match']}")
        ok = ok and rep.config["partition_match"]
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_mms(cfg: RunConfig, args) -> int:
    rows = bench.mms_study(cfg)
    print("level,h,dofs,error,rate")
    for r in rows:
        print(f"{r['level']},{r['h']:.6g},{r['dofs']},{r['error']:.6e},{r['rate']:.4f}")
    rates = [r["rate"] for r in rows[1:]]
    errs = [r["error"] for r in rows]
    ok = all(b < a for a, b in zip(errs, errs[1:])) and min(rates) >= cfg.study.mms_rate_min
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_policy_bench(cfg: RunConfig, args) -> int:
    rows = bench.policy_bench(cfg)
    path = _out(cfg, "policy_bench.csv")
    bench.write_rows(rows, path)
    for r in rows:
        print(f"{r['policy']}: setup {r['setup_seconds']:.3f} s, sweep {r['sweep_seconds'] * 1e3:.2f} ms, cached {r['cached_bytes']} B")
    return EXIT_OK


def cmd_partition_check(cfg: RunConfig, args) -> int:
    res = bench.partition_check(cfg, negative_control=args.negative_control)
    print("iterations by ranks: " + ", ".join(f"P={k}: {v}" for k, v in res.iterations.items()))
    if res.passed:
        print("PASS: iterates bitwise identical for every rank count")
        return EXIT_OK
    P, it = res.mismatch
    print(f"FAIL: P={P} differs from P=1 first at iteration {it}")
    return EXIT_VERIFY


def cmd_mesh_dump(cfg: RunConfig, args) -> int:
    dom, fine, _ = bench.channel_problem(cfg)
    rows = bench.mesh_rows(fine, dom)
    bench.write_rows(rows, _out(cfg, "mesh.csv"))
    print(f"{len(rows)} leaves written")
    return EXIT_OK


def cmd_export_operator(cfg: RunConfig, args) -> int:
    from .assembly import assemble, compute_quadratures
    from .mesh import make_level

    dom, fine, params = bench.channel_problem(cfg)
    grid = make_level(fine)
    m = cfg.mesh
    op = assemble(grid, compute_quadratures(grid, dom, m.subdivision, m.gauss, m.surface_resolution, params.alpha_fict), params)
    pre = cfg.output.prefix
    export_operator(op, grid, _out(cfg, pre + ".mtx"), _out(cfg, pre + "_dofs.csv"), _out(cfg, pre + "_rhs.mtx"))
    print(f"operator with {op.n} DoFs and {op.matrix.nnz} stored entries written")
    return EXIT_OK


def cmd_cut_cells(cfg: RunConfig, args) -> int:
    rows = bench.cut_cell_rows(cfg)
    bench.write_rows(rows, _out(cfg, "cut_cells.csv"), ["cell", "class", "area_fraction", "arclength", "degenerate"])
    print(f"{len(rows)} cut cells, {sum(r['degenerate'] for r in rows)} without a boundary segment")
    return EXIT_OK


HANDLERS = {
    "solve": cmd_solve,
    "mms": cmd_mms,
    "policy-bench": cmd_policy_bench,
    "partition-check": cmd_partition_check,
    "mesh-dump": cmd_mesh_dump,
    "export-operator": cmd_export_operator,
    "cut-cells": cmd_cut_cells,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; 2 is reserved for failed verification
        return EXIT_OK if exc.code in (0, None) else EXIT_ERROR
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if getattr(args, "dump_config", False):
            print(cfg.dumps())
            return EXIT_OK
        return HANDLERS[args.command](cfg, args)
    except (ConfigError, mg.CoarseSolveError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # surfaced with context, never a traceback dump
        logging.getLogger("fcmg").debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
