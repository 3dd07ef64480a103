"""Regenerate the shipped tuned-parameter table.

Each stage grid-searches one system and writes ``<out>/<system>.csv`` plus its
full score table; ``--merge`` concatenates the stage files into the package
table.  Grids other than the Single Ring one are reduced to keep the search
within a few CPU-hours; see the README.

    python3 scripts/tune_shipped.py single_ring figure_eight ... --out tuning
    python3 scripts/tune_shipped.py --merge --out tuning
"""
import argparse
import csv
import json
import os
import time

import numpy as np

from mixtraffic.derived import (GridSpec, TunedEntry, default_grid, grid_search, load_tuned,
                                make_derived, write_tuned)
from mixtraffic.env.core import EnvConfig
from mixtraffic.evaluate import EvalConfig, evaluate

RING_DENSITIES = (230, 240, 250, 260, 270)
DOUBLE_RING_DENSITIES = (240, 250, 260)
STAGES = ("single_ring", "double_ring", "figure_eight", "bottleneck", "ramp", "intersection")
PACKAGE_TABLE = os.path.join(os.path.dirname(__file__), "..", "src", "mixtraffic", "data",
                             "tuned_params.csv")


def _values(lo, hi, step):
    return tuple(float(x) for x in np.round(np.arange(lo, hi + step / 2, step), 2))


def plan(system, out):
    """(density, stored key, grid, seeds) rows for one stage."""
    if system == "single_ring":
        return [(c, (c,), default_grid(system), 10) for c in RING_DENSITIES]
    if system == "double_ring":
        single = load_tuned(os.path.join(out, "single_ring.csv"))
        rows = []
        for c in DOUBLE_RING_DENSITIES:
            v = single[("single_ring", f"{c:g}")]["params"]["v_target"]
            grid = GridSpec(("v_target",), (_values(max(0.5, v - 1.0), v + 1.0, 0.25),))
            rows.append((c, (c,), grid, 3))
        return rows
    if system == "figure_eight":
        grid = GridSpec(("v_target",), (_values(1.0, 4.5, 0.25),))
        return [(r, (r,), grid, 2) for r in (25, 30, 35)]
    if system == "bottleneck":
        xs = _values(10, 100, 10)
        return [(2600, ("*",), GridSpec(("x1", "x2"), (xs, xs)), 2)]
    if system == "ramp":
        return [(2000, ("*",), GridSpec(("v_target",), (_values(1.0, 30.0, 1.0),)), 2)]
    phases = tuple(range(10, 61, 10))
    grid = GridSpec(("t_h", "t_v"), (phases, phases))
    return [((700, 700), (700, 700), grid, 2)]


def run_stage(system, out):
    entries, lines = [], ["density,params,mean_score,std"]
    for density, key, grid, n_seeds in plan(system, out):
        cfg = EnvConfig(system, density)
        cfg.network()  # raises on an out-of-range density instead of scoring -inf everywhere
        ecfg = EvalConfig(n_seeds=n_seeds)
        t0 = time.time()
        res = grid_search(lambda pt: make_derived(system, pt), grid,
                          lambda ctrl: evaluate(ctrl, cfg, ecfg).values)
        std = next(s for pt, m, s in res.table if pt == res.best)
        entries.append(TunedEntry(system, key, res.best, res.best_score, std))
        if system == "intersection":
            entries.append(TunedEntry(system, ("*",), res.best, res.best_score, std))
        for pt, m, s in res.table:
            lines.append(f"{'/'.join(f'{x:g}' for x in cfg.density_param)},"
                         f"\"{json.dumps(pt, sort_keys=True)}\",{m:.6g},{s:.6g}")
        print(f"{system} {density}: {res.best} -> {res.best_score:.4f} "
              f"({time.time() - t0:.0f} s)", flush=True)
    write_tuned(os.path.join(out, f"{system}.csv"), entries)
    with open(os.path.join(out, f"{system}_grid.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")


def merge(out, dest):
    rows = []
    header = None
    for system in STAGES:
        with open(os.path.join(out, f"{system}.csv"), newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            rows.extend(reader)
    with open(dest, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("stages", nargs="*", help=", ".join(STAGES))
    p.add_argument("--out", default="tuning")
    p.add_argument("--merge", action="store_true")
    args = p.parse_args()
    unknown = set(args.stages) - set(STAGES)
    if unknown:
        p.error(f"unknown stages {sorted(unknown)}")
    os.makedirs(args.out, exist_ok=True)
    for s in args.stages:
        run_stage(s, args.out)
    if args.merge:
        merge(args.out, PACKAGE_TABLE)


if __name__ == "__main__":
    main()
