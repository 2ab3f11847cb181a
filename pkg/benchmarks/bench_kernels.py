"""Compiled versus numpy kernels: wall time and output agreement.

Writes one CSV row per (kernel, backend) with the best time over repeats,
the speed-up against the numpy fallback and the largest output difference.

    python3 benchmarks/bench_kernels.py --out benchmarks/results/kernels.csv
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time

import numpy as np

from smoothfeedback import kernels
from smoothfeedback.core import BoxGrid, _pad_cubic, make_rng
from smoothfeedback.regularize import _offsets_within, mollifier_stencil

logger = logging.getLogger("bench_kernels")


def _grid_case(n: int):
    grid = BoxGrid((-4.0, -4.0), (4.0, 4.0), (n, n))
    X = grid.nodes()
    vals = np.ascontiguousarray(0.5 * np.sum(X * X, axis=1) + 0.3 * np.abs(X[:, 0]))
    return grid, vals


def case_minplus(n: int, lam: float = 0.1):
    grid, vals = _grid_case(n)
    shape = np.array(grid.shape, dtype=np.intp)
    nodes = np.arange(grid.size, dtype=np.intp)
    r = 2.0 * np.sqrt(lam * np.abs(vals).max())
    r2 = np.full(grid.size, r * r)
    offs, d2 = _offsets_within(grid.spacing, r + 1e-12)

    def run(mod):
        out_v = np.empty(grid.size)
        out_a = np.empty(grid.size, dtype=np.intp)
        mod.grid_minplus(vals, shape, offs, d2, nodes, r2, lam, out_v, out_a)
        return out_v

    return f"{n}x{n} nodes, {len(offs)} offsets", run


def case_convolve(n: int, eps: float = 0.4):
    grid, vals = _grid_case(n)
    shape = np.array(grid.shape, dtype=np.intp)
    offs, w = mollifier_stencil(grid.spacing, eps)
    sub = grid.with_margin(eps)
    k0 = grid.node_offset(sub)
    mesh = np.meshgrid(*[np.arange(m) + k for m, k in zip(sub.shape, k0)], indexing="ij")
    nodes = np.ravel_multi_index(tuple(m.ravel() for m in mesh), grid.shape).astype(np.intp)

    def run(mod):
        out = np.empty(len(nodes))
        mod.grid_convolve(vals, shape, offs, w, nodes, out)
        return out

    return f"{n}x{n} nodes, {len(w)}-point stencil", run


def case_interp(n: int, order: str, n_pts: int = 200000):
    grid, vals = _grid_case(n)
    shape = np.array(grid.shape, dtype=np.intp)
    lower = np.array(grid.lower)
    step = grid.spacing
    pts = make_rng(0, 1).uniform(-3.9, 3.9, size=(n_pts, 2))
    data = vals if order == "linear" else np.ascontiguousarray(_pad_cubic(vals.reshape(grid.shape)).ravel())

    def run(mod):
        out = np.empty(n_pts)
        fn = mod.interp_linear if order == "linear" else mod.interp_cubic
        fn(data, shape, lower, step, pts, out)
        return out

    return f"{n}x{n} grid, {n_pts} queries", run


def case_transcription(nodes: int = 200, calls: int = 200):
    rng = make_rng(0, 2)
    U = [np.ascontiguousarray(rng.normal(size=(nodes, 2))) for _ in range(calls)]
    y0 = np.array([-5.0, 0.3])
    z = np.array([-2.0, 0.0])

    def run(mod):
        g = np.empty((nodes, 2))
        out = []
        for u in U:
            out.append(mod.transcription_cost(u, y0, 15.0, 10.0, z, 0.5, 1.0, g))
            out.extend(g.ravel())
        return np.array(out)

    return f"{calls} cost+adjoint calls, {nodes} nodes", run


def case_shoot(nsteps: int = 5000, calls: int = 20):
    y0 = np.array([-5.0, 0.3])
    z = np.array([-2.0, 0.0])
    U0 = [np.array([1.0, 0.1 * k]) for k in range(calls)]

    def run(mod):
        out = []
        for u0 in U0:
            traj = np.empty((nsteps + 1, 5))
            mod.pmp_shoot(y0, u0, 3.0, nsteps, 10.0, z, 0.5, 1.0, traj)
            out.append(traj[-1])
        return np.concatenate(out)

    return f"{calls} shots, {nsteps} RK4 steps", run


def _best(run, mod, repeat: int):
    best = np.inf
    res = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        res = run(mod)
        best = min(best, time.perf_counter() - t0)
    return best, res


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=os.path.join("benchmarks", "results", "kernels.csv"))
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="small problem sizes")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        compiled = kernels.backend_module("cython")
    except ImportError:
        logger.error("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return 1
    python = kernels.backend_module("python")
    n = 61 if args.quick else 161
    cases = {
        "grid_minplus": case_minplus(n),
        "grid_convolve": case_convolve(n),
        "interp_linear": case_interp(n, "linear", 20000 if args.quick else 200000),
        "interp_cubic": case_interp(n, "cubic", 20000 if args.quick else 200000),
        "transcription_cost": case_transcription(calls=20 if args.quick else 200),
        "pmp_shoot": case_shoot(nsteps=1000 if args.quick else 5000, calls=5 if args.quick else 20),
    }
    rows = []
    for name, (size, run) in cases.items():
        t_py, r_py = _best(run, python, args.repeat)
        t_cy, r_cy = _best(run, compiled, args.repeat)
        diff = float(np.max(np.abs(np.asarray(r_py) - np.asarray(r_cy))))
        logger.info("%-20s python %.4fs  cython %.4fs  speed-up %6.1fx  max diff %.2e", name, t_py, t_cy,
                    t_py / t_cy, diff)
        rows.append([name, size, "python", repr(t_py), "1.0", repr(diff)])
        rows.append([name, size, "cython", repr(t_cy), repr(t_py / t_cy), repr(diff)])
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        fh.write("# quantity: best wall time over repeats per kernel backend; max_abs_diff between backends\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kernel", "size", "backend", "seconds", "speedup_vs_python", "max_abs_diff"])
        w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
