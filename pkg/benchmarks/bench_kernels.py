"""Compare the compiled kernels with the numpy fallback.

Runs each hot kernel on the smoother and operator of a small channel grid
with both backends, reports the largest relative difference between their
results and prints the median time of each.

    python3 benchmarks/bench_kernels.py [--base_level 5 --r_max 6 --repeats 5]
"""

import argparse
import time

import numpy as np

from fcmg import _backend
from fcmg.assembly import assemble, compute_quadratures
from fcmg.bench import channel_problem
from fcmg.config import RunConfig
from fcmg.mesh import make_level
from fcmg.smoother import build_subdomains


def median_time(fn, repeats):
    out, times = None, []
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times)), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--base_level", type=int, default=5)
    ap.add_argument("--r_max", type=int, default=6)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)

    cfg = RunConfig()
    cfg.set("base_level", args.base_level)
    cfg.set("r_max", args.r_max)
    dom, fine, params = channel_problem(cfg)
    grid = make_level(fine)
    op = assemble(grid, compute_quadratures(grid, dom), params)
    M, subs = op.matrix, build_subdomains(op)
    sel = np.arange(len(subs), dtype=np.int64)
    r = np.random.default_rng(0).standard_normal(op.n)
    try:
        backends = {"python": _backend.get("python"), "cython": _backend.get("cython")}
    except ImportError:
        print("compiled extension not built; only the fallback is available")
        return 1

    def cases(k):
        slabs = k.inverse_slabs(M.indptr, M.indices, M.data, subs.ptr, subs.idx, subs.out_pos)
        local = k.extract_local(M.indptr, M.indices, M.data, subs.ptr, subs.idx)
        out = np.empty((len(sel), 3))
        return {
            "csr_matvec": lambda: k.csr_matvec(M.indptr, M.indices, M.data, r, np.empty(op.n)),
            "inverse_slabs": lambda: k.inverse_slabs(M.indptr, M.indices, M.data, subs.ptr, subs.idx, subs.out_pos),
            "apply_inverse": lambda: (k.apply_inverse(subs.ptr, subs.idx, slabs, sel, r, out), out.copy())[1],
            "apply_matrix": lambda: (k.apply_matrix(*local, subs.ptr, subs.out_pos, subs.idx, sel, r, out), out.copy())[1],
            "apply_none": lambda: (k.apply_none(M.indptr, M.indices, M.data, subs.ptr, subs.idx, subs.out_pos, sel, r, out), out.copy())[1],
        }

    print(f"operator: {op.n} DoFs, {M.nnz} entries, {len(subs)} subdomains")
    print(f"{'kernel':<16}{'python s':>12}{'cython s':>12}{'speedup':>10}{'rel diff':>12}")
    tables = {name: cases(k) for name, k in backends.items()}
    for kernel in tables["python"]:
        tp, op_ = median_time(tables["python"][kernel], args.repeats)
        tc, oc = median_time(tables["cython"][kernel], args.repeats)
        diff = float(np.max(np.abs(op_ - oc)) / max(np.max(np.abs(op_)), 1e-300))
        print(f"{kernel:<16}{tp:>12.4f}{tc:>12.4f}{tp / tc:>10.1f}{diff:>12.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
