"""Rule-based Derived controllers, the Baseline wrapper and the grid-search tuner.

Derived controllers may read any part of the world state.  Each returns a
joint action: an acceleration per AV, or ``UNCONTROLLED`` where the rule
hands the vehicle back to the IDM.
"""
import csv
import itertools
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .control import Baseline, Controller
from .env.core import UNCONTROLLED, AgentAction, EnvConfig
from .env.observe import approach_distance
from .sim import world as W
from .sim.network import System
from .sim.routes import distances_to_end, final_merge, lane_offsets

BOTTLENECK_GATE = 2200.0  # target inflow at or below which AVs are left uncontrolled
RAMP_GATE = 400.0  # distance to the merge inside which AVs are left uncontrolled (m)
RAMP_MAX_LEADERS = 20
INTERSECTION_GATE = 15.0  # control range before the crossing box (m)
GATHER_SPEED = 0.5  # Figure Eight speed while the platoon is still forming (m/s)


def equalize(v_target: float, v_current: float, c_accel: float = 2.6, c_decel: float = 4.5,
             dt: float | None = None) -> float:
    """Move toward ``v_target`` at 0.75 of the action bounds.

    With ``dt`` given, the command is capped so the speed lands on the target
    instead of overshooting it within the step.
    """
    up, down = 0.75 * c_accel, -0.75 * c_decel
    if v_current < v_target:
        a = up
    elif v_current > v_target:
        a = down
    else:
        return 0.0
    if dt is not None:
        exact = (v_target - v_current) / dt
        a = min(a, exact) if a > 0 else max(a, exact)
    return a


def equalize_many(v_target, v_current, c_accel=2.6, c_decel=4.5, dt=None) -> np.ndarray:
    """Vectorised :func:`equalize` with identical arithmetic."""
    v_target = np.broadcast_to(np.asarray(v_target, dtype=np.float64), np.shape(v_current))
    v_current = np.asarray(v_current, dtype=np.float64)
    up, down = 0.75 * c_accel, -0.75 * c_decel
    a = np.where(v_current < v_target, up, np.where(v_current > v_target, down, 0.0))
    if dt is not None:
        exact = (v_target - v_current) / dt
        a = np.where(a > 0, np.minimum(a, exact), np.where(a < 0, np.maximum(a, exact), 0.0))
    return a


def _target(v: float) -> float:
    v = float(v)
    if not v >= 0.0:
        raise ValueError(f"target speed must be >= 0, got {v}")
    return v


def _accel(value: float) -> AgentAction:
    return AgentAction(float(value), direct=True)


class _Continuous(Controller):
    def _eq(self, cfg, target, v):
        return equalize(target, v, cfg.c_accel, cfg.c_decel, cfg.dt)


class DerivedRing(_Continuous):
    """Drive the AV at a fixed target speed (Single Ring, and Double Ring without lane changes)."""

    name = "derived"
    batch_ring = True

    def __init__(self, v_target: float):
        self.v_target = _target(v_target)

    def accel(self, cfg, speed):
        return self._eq(cfg, self.v_target, speed)

    def ring_accel(self, cfg, obs_raw, step):
        a = equalize_many(self.v_target, obs_raw[:, 0], cfg.c_accel, cfg.c_decel, cfg.dt)
        return np.minimum(np.maximum(a, -cfg.c_decel), cfg.c_accel)

    def act(self, cfg, world, step):
        return {vid: _accel(self.accel(cfg, world.speed[world.index_of(vid)]))
                for vid in world.av_ids()}


def trailing_distance(world: W.WorldState, i: int) -> float:
    """Distance along the loop from the furthest-behind vehicle to AV ``i``."""
    total = world.topo.length[int(world.lane[i])]
    others = np.arange(world.n) != i
    if not others.any():
        return 0.0
    return float(np.max(np.mod(world.pos[i] - world.pos[others], total)))


class DerivedFigureEight(_Continuous):
    """Gather every follower behind the AV, then lead the platoon at ``v_target``."""

    name = "derived"

    def __init__(self, v_target: float, gather_speed: float = GATHER_SPEED):
        self.v_target = _target(v_target)
        self.gather_speed = _target(gather_speed)

    def target_for(self, world, i) -> float:
        total = world.topo.length[int(world.lane[i])]
        return self.v_target if trailing_distance(world, i) < total / 2 else self.gather_speed

    def act(self, cfg, world, step):
        out = {}
        for vid in world.av_ids():
            i = world.index_of(vid)
            out[vid] = _accel(self._eq(cfg, self.target_for(world, i), world.speed[i]))
        return out


class DerivedBottleneck(Controller):
    """Hold an AV back near the final merge while a human on the other branch is close."""

    name = "derived"

    def __init__(self, x1: float, x2: float):
        if not (x1 > 0 and x2 > 0):
            raise ValueError("thresholds must be positive")
        self.x1 = float(x1)
        self.x2 = float(x2)

    @staticmethod
    def merge_geometry(world):
        """Per-vehicle distance to the final merge and branch index (-1 once merged)."""
        feeders, _ = final_merge(world)
        d = np.full(world.n, np.nan)
        branch = np.full(world.n, -1)
        for b, f in enumerate(feeders):
            df = distances_to_end(world, f)
            on = ~np.isnan(df)
            d[on] = df[on]
            branch[on] = b
        return d, branch

    def decide(self, world, i, d, branch) -> bool:
        """True when AV ``i`` should stop."""
        if branch[i] < 0:
            return False
        cand = np.flatnonzero((branch >= 0) & (branch != branch[i]) & (d > d[i]))
        if cand.size == 0:
            return False
        j = cand[np.argmin(d[cand])]
        return bool(world.kind[j] != W.AV and d[i] < self.x1 and d[j] < self.x2)

    def act(self, cfg, world, step):
        avs = world.av_ids()
        if cfg.density_param[0] <= BOTTLENECK_GATE:
            return {vid: UNCONTROLLED for vid in avs}
        d, branch = self.merge_geometry(world)
        out = {}
        for vid in avs:
            stop = self.decide(world, world.index_of(vid), d, branch)
            out[vid] = _accel(-cfg.c_decel if stop else cfg.c_accel)
        return out


def ramp_merge_distance(world, i) -> float:
    """Distance from vehicle ``i`` to the merge point (end of its merge lane)."""
    feeders, _ = final_merge(world)
    offs = lane_offsets(world, int(world.lane[i]))
    for f in feeders:
        if f in offs:
            return offs[f] + world.topo.length[f] - world.pos[i]
    return -math.inf  # already merged


def leaders_on_route(world, i) -> int:
    """Vehicles ahead of ``i`` on the lanes of its remaining route."""
    offs = lane_offsets(world, int(world.lane[i]))
    me = world.pos[i]
    count = 0
    for j in range(world.n):
        L = int(world.lane[j])
        if j != i and L in offs and offs[L] + world.pos[j] > me:
            count += 1
    return count


class DerivedRamp(_Continuous):
    """Meter highway AVs upstream of the merge; IDM inside the last 400 m."""

    name = "derived"

    def __init__(self, v_target: float):
        self.v_target = _target(v_target)

    def act(self, cfg, world, step):
        out = {}
        for vid in world.av_ids():
            i = world.index_of(vid)
            if ramp_merge_distance(world, i) <= RAMP_GATE:
                out[vid] = UNCONTROLLED
                continue
            target = 0.0 if leaders_on_route(world, i) > RAMP_MAX_LEADERS else self.v_target
            out[vid] = _accel(self._eq(cfg, target, world.speed[i]))
        return out


def box_has_uncontrolled(world) -> bool:
    """True when a human vehicle occupies the crossing box."""
    _, _, occupied, _ = W.zone_state(world)[0]
    return any(world.kind[i] != W.AV for ax in ("h", "v") for i in occupied[ax])


class DerivedIntersection(Controller):
    """Fixed-cycle signal for approaching AVs: horizontal for ``t_h`` steps, then vertical."""

    name = "derived"

    def __init__(self, t_h: int, t_v: int):
        if t_h < 1 or t_v < 1:
            raise ValueError("phase lengths must be >= 1 step")
        self.t_h = int(t_h)
        self.t_v = int(t_v)

    def phase(self, step: int) -> str:
        return "h" if step % (self.t_h + self.t_v) < self.t_h else "v"

    def act(self, cfg, world, step):
        members = world.topo.zones[0][0]
        axis_of = {lane: ax for lane, _, _, ax in members}
        phase = self.phase(step)
        crossing = None
        out = {}
        for vid in world.av_ids():
            i = world.index_of(vid)
            d = approach_distance(world, i)
            if not 0.0 <= d < INTERSECTION_GATE:
                out[vid] = UNCONTROLLED
                continue
            if crossing is None:
                crossing = box_has_uncontrolled(world)
            go = axis_of[int(world.lane[i])] == phase and not crossing
            out[vid] = _accel(cfg.c_accel if go else -cfg.c_decel)
        return out


# ------------------------------------------------------------------ tuned table
@dataclass(frozen=True)
class TunedEntry:
    system: str
    density: tuple
    params: dict
    score: float
    std: float


def _density_key(d) -> str:
    d = d if isinstance(d, (tuple, list)) else (d,)
    return "/".join(x if x == "*" else f"{float(x):g}" for x in d)


def load_tuned(path=None) -> dict:
    """Tuned-parameter table keyed by (system, density key)."""
    if path is None:
        fh = resources.files("mixtraffic").joinpath("data/tuned_params.csv").open()
    else:
        fh = open(path)
    table = {}
    with fh:
        for row in csv.DictReader(fh):
            key = (row["system"], row["density_param"])
            entry = table.setdefault(key, {"params": {}, "score": float(row["mean_score"]),
                                           "std": float(row["std"])})
            entry["params"][row["parameter"]] = float(row["value"])
    return table


def write_tuned(path, entries) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["system", "density_param", "parameter", "value", "mean_score", "std"])
        for e in entries:
            for name, value in e.params.items():
                w.writerow([e.system, _density_key(e.density), name, f"{value:g}",
                            f"{e.score:.6g}", f"{e.std:.6g}"])


def tuned_params(system, density, table=None) -> dict:
    """Tuned controller parameters for a configuration.

    Bottleneck thresholds are shared by every density above the gate; the
    Ramp target speed is shared across densities.
    """
    system = System.parse(system)
    table = table if table is not None else load_tuned()
    key = (system.value, _density_key(density))
    if key in table:
        return dict(table[key]["params"])
    shared = [k for k in table if k[0] == system.value and k[1] == "*"]
    if shared:
        return dict(table[shared[0]]["params"])
    raise KeyError(f"no tuned parameters for {system.value} at {_density_key(density)}")


def make_derived(system, params: dict) -> Controller:
    system = System.parse(system)
    if system in (System.SINGLE_RING, System.DOUBLE_RING):
        return DerivedRing(params["v_target"])
    if system is System.FIGURE_EIGHT:
        return DerivedFigureEight(params["v_target"])
    if system is System.BOTTLENECK:
        return DerivedBottleneck(params["x1"], params["x2"])
    if system is System.RAMP:
        return DerivedRamp(params["v_target"])
    return DerivedIntersection(int(params["t_h"]), int(params["t_v"]))


def derived_for(cfg: EnvConfig, table=None) -> Controller:
    """Derived controller with the shipped tuned parameters for ``cfg``."""
    return make_derived(cfg.system, tuned_params(cfg.system, cfg.density_param, table))


# ------------------------------------------------------------------ grid search
@dataclass(frozen=True)
class GridSpec:
    names: tuple
    candidates: tuple  # one candidate list per name
    n_seeds: int = 10

    def __post_init__(self):
        if len(self.names) != len(self.candidates) or not self.names:
            raise ValueError("one candidate list per parameter name required")
        for c in self.candidates:
            if len(c) == 0 or not all(math.isfinite(float(x)) for x in c):
                raise ValueError("candidate lists must be non-empty and finite")

    def points(self):
        """Grid points in lexicographic index order."""
        for combo in itertools.product(*self.candidates):
            yield dict(zip(self.names, combo))


def default_grid(system, n_seeds: int = 10) -> GridSpec:
    system = System.parse(system)
    if system in (System.SINGLE_RING, System.DOUBLE_RING, System.FIGURE_EIGHT, System.RAMP):
        return GridSpec(("v_target",), (tuple(np.round(np.arange(0.5, 30.0001, 0.25), 2)),), n_seeds)
    if system is System.BOTTLENECK:
        xs = tuple(float(x) for x in range(5, 101, 5))
        return GridSpec(("x1", "x2"), (xs, xs), n_seeds)
    phases = tuple(range(4, 61, 2))  # 2 s to 30 s at 0.5 s steps
    return GridSpec(("t_h", "t_v"), (phases, phases), n_seeds)


@dataclass
class GridResult:
    best: dict
    best_score: float
    table: list = field(default_factory=list)  # (params, mean score, std) in grid order


def grid_search(family, grid: GridSpec, score_fn) -> GridResult:
    """Exhaustive search.

    ``family`` maps a parameter dict to a controller; ``score_fn(controller)``
    returns per-seed scores.  Failures score -inf; ties go to the earliest point.
    """
    table = []
    best_k, best_score = -1, -math.inf
    for k, point in enumerate(grid.points()):
        try:
            scores = np.asarray(score_fn(family(point)), dtype=np.float64)
            mean = float(np.mean(scores)) if scores.size else -math.inf
            std = float(np.std(scores)) if scores.size else math.nan
            if not math.isfinite(mean):
                mean = -math.inf
        except Exception:
            mean, std = -math.inf, math.nan
        table.append((point, mean, std))
        if best_k < 0 or mean > best_score:
            best_k, best_score = k, mean
    return GridResult(dict(table[best_k][0]), best_score, table)


__all__ = [
    "Baseline", "DerivedBottleneck", "DerivedFigureEight", "DerivedIntersection", "DerivedRamp",
    "DerivedRing", "GridResult", "GridSpec", "TunedEntry", "default_grid", "derived_for",
    "equalize", "equalize_many", "grid_search", "load_tuned", "make_derived", "tuned_params", "write_tuned",
]
