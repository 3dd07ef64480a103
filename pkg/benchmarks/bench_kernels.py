"""Compiled vs pure-Python kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--rings 40] [--steps 2000]

Reports the best-of-``repeat`` wall time per call for each kernel and
backend, and checks that both backends return identical results.
"""
import argparse
import time

import numpy as np

from mixtraffic import _core_py, kernels
from mixtraffic.sim.params import VEHICLE_LENGTH, IdmParams

try:
    from mixtraffic import _core
except ImportError:  # extension not built
    _core = None


def best_time(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def ring_case(rings, n, steps, seed=0):
    rng = np.random.default_rng(seed)
    c = np.full(rings, 250.0)
    pos0 = np.tile(np.arange(n) * 250.0 / n, (rings, 1))
    noise = rng.standard_normal((steps, rings, n))
    ctrl = np.zeros((rings, n))
    controlled = np.zeros((rings, n), dtype=np.uint8)
    idm = IdmParams()

    def run(impl):
        pos, vel = pos0.copy(), np.zeros_like(pos0)
        for k in range(steps):
            kernels.ring_step(pos, vel, ctrl, controlled, noise[k], c, VEHICLE_LENGTH, idm, 9.0,
                              0.1, impl=impl)
        return pos, vel

    return run


def vector_cases(size, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.uniform(0, 30, size)
    gap = rng.uniform(0.5, 80, size)
    dv = rng.normal(0, 3, size)
    proposed = rng.normal(0, 2, size)
    p = IdmParams()
    return {
        "idm_accel": lambda impl: kernels.idm_accel(v, gap, dv, p.a_max, p.b_comf, p.v0, p.s0,
                                                    p.tau, p.delta_exp, impl=impl),
        "safety_clip": lambda impl: kernels.safety_clip(proposed, v, gap, v * 0.9,
                                                        p.b_comf, 9.0, 0.1, impl=impl),
        "stop_distance": lambda impl: kernels.stop_distance(v, p.b_comf, 0.1, impl=impl),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=10_000, help="vector length for elementwise kernels")
    ap.add_argument("--rings", type=int, default=40)
    ap.add_argument("--vehicles", type=int, default=22)
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args(argv)
    if _core is None:
        print("compiled extension not built; only the Python backend is timed")
    backends = [("python", _core_py)] + ([("compiled", _core)] if _core is not None else [])
    cases = vector_cases(args.size)
    cases[f"ring_step x{args.steps}"] = ring_case(args.rings, args.vehicles, args.steps)
    print(f"{'kernel':<22}{'python (s)':>12}{'compiled (s)':>14}{'speedup':>10}  identical")
    for name, fn in cases.items():
        times, outs = {}, {}
        for label, impl in backends:
            times[label], outs[label] = best_time(lambda: fn(impl), args.repeat)
        py = times["python"]
        if "compiled" in times:
            co = times["compiled"]
            a, b = outs["python"], outs["compiled"]
            a = a if isinstance(a, tuple) else (a,)
            b = b if isinstance(b, tuple) else (b,)
            same = all(np.array_equal(x, y) for x, y in zip(a, b))
            print(f"{name:<22}{py:>12.5f}{co:>14.5f}{py / co:>10.1f}  {same}")
        else:
            print(f"{name:<22}{py:>12.5f}{'-':>14}{'-':>10}  -")


if __name__ == "__main__":
    main()
