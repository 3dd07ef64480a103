"""Evaluation protocol, metrics reports, trajectory traces and IDM sweeps.

Protocol per seed: ``h0`` warmup steps with every AV uncontrolled, ``h1``
settling steps under the controller, then ``h`` measured steps.
"""
import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .control import Baseline, Controller
from .env.core import EnvConfig, env_step
from .env.ring_batch import RingBatch
from .sim.network import System
from .sim import world as W
from .sim.params import ConfigurationError, ContractViolation

TRACE_HEADER = ("t", "vehicle_id", "kind", "lane", "pos", "speed", "signal")
SWITCH_MARKER = "# controller_switch"


@dataclass(frozen=True)
class EvalConfig:
    n_seeds: int = 10
    h0: int | None = None  # default 500 s of warmup
    h1: int | None = None  # default 1500 s of settling
    h: int | None = None  # default 1000 s measured
    seed: int = 0

    def windows(self, dt: float) -> tuple[int, int, int]:
        """(h0, h1, h) in steps, checked against their maxima."""
        limits = (int(round(500 / dt)), int(round(1500 / dt)), int(round(1000 / dt)))
        vals = tuple(lim if v is None else int(v) for v, lim in zip((self.h0, self.h1, self.h), limits))
        for name, v, lim in zip(("h0", "h1", "h"), vals, limits):
            if not 0 <= v <= lim:
                raise ConfigurationError(f"{name}={v} outside [0, {lim}] steps")
        if vals[2] < 1:
            raise ConfigurationError("measurement window must be at least one step")
        if self.n_seeds < 1:
            raise ConfigurationError("n_seeds must be >= 1")
        return vals

    @property
    def seeds(self) -> list[int]:
        return [self.seed + k for k in range(self.n_seeds)]


@dataclass
class SeedResult:
    seed: int
    value: float
    collisions: int
    terminated: bool


@dataclass
class DensityMetrics:
    density: tuple
    metric: str  # "mean_speed_mps" or "outflow_veh_per_hr"
    mean: float
    std: float
    seeds: list
    values: list
    collisions: list
    excluded_seeds: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "density": list(self.density),
            "metric": self.metric,
            "mean": _num(self.mean),
            "std": _num(self.std),
            "seeds": list(self.seeds),
            "values": [_num(v) for v in self.values],
            "collisions": list(self.collisions),
            "excluded_seeds": list(self.excluded_seeds),
        }


def _num(x):
    return None if x is None or not math.isfinite(x) else float(x)


@dataclass
class MetricsReport:
    system: str
    controller: str
    objective: str
    windows: tuple
    entries: list

    def to_json(self) -> str:
        doc = {
            "system": self.system,
            "controller": self.controller,
            "objective": self.objective,
            "windows": {"h0": self.windows[0], "h1": self.windows[1], "h": self.windows[2]},
            "entries": [e.as_dict() for e in self.entries],
        }
        return json.dumps(doc, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["system", "controller", "density", "metric", "mean", "std", "n", "collisions"])
        for e in self.entries:
            w.writerow([self.system, self.controller, "/".join(f"{x:g}" for x in e.density),
                        e.metric, f"{e.mean:.9g}", f"{e.std:.9g}", len(e.values), sum(e.collisions)])
        return buf.getvalue()


# ------------------------------------------------------------------------ trace
class Trace:
    """Per-step vehicle rows for time-space diagrams."""

    def __init__(self):
        self.rows = []
        self.switch_time = None

    def record(self, world: W.WorldState) -> None:
        t = world.t
        lanes = world.topo.lane_ids
        for k in range(world.n):
            sig = int(world.signal[k])
            self.rows.append((t, int(world.ids[k]), W.KIND_NAMES[world.kind[k]],
                              lanes[world.lane[k]], float(world.pos[k]), float(world.speed[k]),
                              "" if sig == W.NO_SIGNAL else lanes[sig]))

    def mark_switch(self, t: float) -> None:
        self.switch_time = float(t)


def format_trace(trace: Trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    if trace.switch_time is not None:
        buf.write(f"{SWITCH_MARKER} t={trace.switch_time:.9g}\n")
    for t, vid, kind, lane, pos, speed, sig in trace.rows:
        w.writerow([f"{t:.9g}", vid, kind, lane, f"{pos:.9g}", f"{speed:.9g}", sig])
    return buf.getvalue()


def export_timespace(trace: Trace, path) -> None:
    """Write the trajectory CSV; the switch marker is a comment line after the header."""
    text = format_trace(trace)
    try:
        with open(path, "w", newline="") as f:
            f.write(text)
    except OSError as exc:
        raise OSError(f"cannot write trajectory CSV to {path}: {exc}") from exc


def read_timespace(path):
    """Parse a trajectory CSV.  Returns (rows as dicts, switch time or None)."""
    switch = None
    rows = []
    with open(path, newline="") as f:
        lines = []
        for line in f:
            if line.startswith(SWITCH_MARKER):
                switch = float(line.split("t=")[1])
            else:
                lines.append(line)
    for r in csv.DictReader(lines):
        r["t"], r["pos"], r["speed"] = float(r["t"]), float(r["pos"]), float(r["speed"])
        r["vehicle_id"] = int(r["vehicle_id"])
        rows.append(r)
    return rows, switch


# --------------------------------------------------------------------- protocol
def metric_name(cfg: EnvConfig) -> str:
    return "mean_speed_mps" if cfg.system.closed else "outflow_veh_per_hr"


def run_episode(controller: Controller, cfg: EnvConfig, seed: int, h0: int, h1: int, h: int,
                trace: Trace | None = None) -> SeedResult:
    """One evaluation episode; returns the measured objective."""
    world = W.WorldState(cfg.network(), seed=seed, idm=cfg.idm, b_cap=cfg.b_cap)

    def tick(joint):
        if joint is None:
            W.step(world)
        else:
            env_step(cfg, world, joint, need_obs=False)
        if trace is not None:
            trace.record(world)

    if trace is not None:
        trace.record(world)
    for _ in range(h0):
        if world.terminal:
            break
        tick(None)
    controller.reset(cfg, world)
    if trace is not None:
        trace.mark_switch(world.t)
    start_settle = world.step_count
    for k in range(h1):
        if world.terminal:
            break
        tick(controller.act(cfg, world, k))
    start_measure = world.step_count
    if not world.terminal and not (start_measure - start_settle == h1 and start_settle == h0):
        raise ContractViolation("evaluation windows overlap")
    count0 = world.outflow_count
    speeds = []
    for k in range(h):
        if world.terminal:
            break
        tick(controller.act(cfg, world, h1 + k))
        speeds.append(float(np.mean(world.speed)) if world.n else 0.0)
    collisions = len(world.collision_events)
    if cfg.system.closed:
        value = float(np.mean(speeds)) if speeds else math.nan
    else:
        value = (world.outflow_count - count0) * 3600.0 / (h * cfg.dt)
    return SeedResult(seed, value, collisions, bool(world.terminal))


def _ring_batch_ok(controller, cfg: EnvConfig) -> bool:
    return cfg.system is System.SINGLE_RING and bool(getattr(controller, "batch_ring", False))


def run_ring_episodes(controller: Controller, cfg: EnvConfig, seeds, h0: int, h1: int,
                      h: int) -> list:
    """The evaluation protocol on a lock-step batch of Single Rings, one per seed.

    Produces the same values as :func:`run_episode` for controllers with a
    vectorised ``ring_accel``.
    """
    rb = RingBatch([cfg.density_param[0]] * len(seeds), seeds, cfg.idm, cfg.b_cap, cfg.dt)
    alive = np.ones(rb.batch, dtype=bool)
    speeds = np.zeros((rb.batch, h))
    n_meas = np.zeros(rb.batch, dtype=np.int64)
    for k in range(h0):
        rb.step()
        alive &= ~rb.collided
        if not alive.any():
            break
    if alive.any():
        controller.reset(cfg, None)
    for k in range(h1 + h):
        if not alive.any():
            break
        cmd = controller.ring_accel(cfg, rb.observe(), k)
        cmd = np.where(alive, cmd, np.nan)
        rb.step(cmd)
        if k >= h1:
            speeds[alive, n_meas[alive]] = rb.mean_speed()[alive]
            n_meas[alive] += 1
        alive &= ~rb.collided
    out = []
    for e, seed in enumerate(seeds):
        # contiguous rows keep np.mean's summation order equal to the generic path
        value = float(np.mean(speeds[e, :n_meas[e]])) if n_meas[e] else math.nan
        # a collided ring stops at its first contact, counted as one event
        out.append(SeedResult(int(seed), value, int(rb.collided[e]), bool(rb.collided[e])))
    return out


def evaluate(controller: Controller, cfg: EnvConfig, ecfg: EvalConfig = EvalConfig(),
             name: str | None = None, fast: bool = True) -> DensityMetrics:
    """Run the protocol on every seed and aggregate.

    Closed-system episodes ended by a collision are excluded from mean/std
    and listed in ``excluded_seeds``.  Single Ring episodes run as one
    lock-step batch when the controller supports it and ``fast`` is set.
    """
    h0, h1, h = ecfg.windows(cfg.dt)
    if fast and _ring_batch_ok(controller, cfg):
        results = run_ring_episodes(controller, cfg, ecfg.seeds, h0, h1, h)
    else:
        results = [run_episode(controller, cfg, s, h0, h1, h) for s in ecfg.seeds]
    kept = [r for r in results if not r.terminated]
    vals = np.array([r.value for r in kept])
    mean = float(np.mean(vals)) if vals.size else math.nan
    std = float(np.std(vals)) if vals.size else math.nan
    return DensityMetrics(
        density=tuple(cfg.density_param), metric=metric_name(cfg), mean=mean, std=std,
        seeds=[r.seed for r in kept], values=[r.value for r in kept],
        collisions=[r.collisions for r in results],
        excluded_seeds=[r.seed for r in results if r.terminated],
    )


def evaluate_report(controller_factory, cfgs, ecfg: EvalConfig, name: str) -> MetricsReport:
    """Evaluate over several density configurations; ``controller_factory(cfg)``
    builds a fresh controller per configuration."""
    cfgs = list(cfgs)
    entries = [evaluate(controller_factory(c), c, ecfg) for c in cfgs]
    return MetricsReport(cfgs[0].system.value, name, cfgs[0].objective.value,
                         ecfg.windows(cfgs[0].dt), entries)


IDM_TABLE = {
    "a_max,b_comf": [(1.0, 1.5), (2.0, 3.0), (2.6, 4.5)],
    "tau": [0.5, 0.75, 1.0, 1.25],
    "v0": [15.0, 20.0, 25.0, 30.0],
    "s0": [2.0, 2.5, 3.0],
    "delta_exp": [2.0, 3.0, 4.0, 5.0],
}


def sweep_idm(cfg: EnvConfig, derived: Controller, param_grid: dict, ecfg: EvalConfig):
    """Baseline and fixed-parameter Derived under IDM variations.

    ``param_grid`` maps an IDM field name (or comma-joined names with tuple
    values) to candidate values; each setting changes only those fields.
    Returns rows of (parameter, value, controller, mean, std).
    """
    rows = []
    for key, values in param_grid.items():
        names = [n.strip() for n in key.split(",")]
        for v in values:
            vals = tuple(v) if len(names) > 1 else (v,)
            if len(vals) != len(names):
                raise ConfigurationError(f"setting {v!r} does not match {key!r}")
            c = replace(cfg, idm=cfg.idm.with_(**dict(zip(names, vals))))
            for label, ctrl in (("baseline", Baseline()), ("derived", derived)):
                m = evaluate(ctrl, c, ecfg)
                rows.append((key, v, label, m.mean, m.std))
    return rows
