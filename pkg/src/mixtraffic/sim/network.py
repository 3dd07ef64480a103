"""Static topology for the six traffic systems."""
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .params import VEHICLE_LENGTH, ConfigurationError

LANE_WIDTH = 3.2
BOX_SIDE = 2 * LANE_WIDTH


class System(str, enum.Enum):
    SINGLE_RING = "single_ring"
    DOUBLE_RING = "double_ring"
    FIGURE_EIGHT = "figure_eight"
    BOTTLENECK = "bottleneck"
    RAMP = "ramp"
    INTERSECTION = "intersection"

    @classmethod
    def parse(cls, name) -> "System":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        for s in cls:
            if key in (s.value, s.value.replace("_", "")):
                return s
        raise ConfigurationError(f"unknown system {name!r}")

    @property
    def closed(self) -> bool:
        return self in (System.SINGLE_RING, System.DOUBLE_RING, System.FIGURE_EIGHT)


# Valid density ranges; Intersection additionally needs F_H + F_V >= 1400.
DENSITY_RANGE = {
    System.SINGLE_RING: (230.0, 270.0),
    System.DOUBLE_RING: (240.0, 260.0),
    System.FIGURE_EIGHT: (25.0, 35.0),
    System.BOTTLENECK: (1700.0, 2600.0),
    System.RAMP: (1500.0, 2500.0),
    System.INTERSECTION: (400.0, 1000.0),
}
INTERSECTION_MIN_SUM = 1400.0


@dataclass(frozen=True)
class Lane:
    id: str
    length: float
    successor: str | None = None  # None: vehicles leave the network at the lane end
    group: int = 0  # parallel lanes sharing a group allow lane changes (Double Ring)


@dataclass(frozen=True)
class Merge:
    """Feeder lanes that join into ``target`` at their common end."""

    feeders: tuple[str, ...]
    target: str


@dataclass(frozen=True)
class ConflictMember:
    lane: str
    start: float
    end: float
    axis: str  # "h" or "v"


@dataclass(frozen=True)
class ConflictZone:
    """A crossing box; members on different axes may not be occupied together.

    Vehicles on ``priority`` axis pass freely; the other axis stops and
    proceeds when the box is clear.
    """

    members: tuple[ConflictMember, ...]
    priority: str = "v"


@dataclass(frozen=True)
class Inflow:
    lane: str
    rate: float  # veh/hr
    av_every: int = 0  # every n-th spawned vehicle is an AV (0: none)


@dataclass(frozen=True)
class NetworkSpec:
    system: System
    density_param: tuple[float, ...]
    lanes: tuple[Lane, ...]
    dt: float
    merges: tuple[Merge, ...] = ()
    conflict_zones: tuple[ConflictZone, ...] = ()
    inflows: tuple[Inflow, ...] = ()
    outflow_lanes: tuple[str, ...] = ()
    initial: tuple[tuple[str, float, bool], ...] = ()  # (lane, pos, is_av) for closed systems
    depart_speed: float = 10.0
    merge_lookahead: float = 50.0
    random_gaps: bool = False  # reseed initial gaps per world seed (rings)
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def closed(self) -> bool:
        return self.system.closed

    def lane(self, lane_id: str) -> Lane:
        for ln in self.lanes:
            if ln.id == lane_id:
                return ln
        raise KeyError(lane_id)

    def route_from(self, lane_id: str) -> tuple[str, ...]:
        """Lane sequence a vehicle on ``lane_id`` follows until it leaves or loops."""
        route = [lane_id]
        nxt = self.lane(lane_id).successor
        while nxt is not None and nxt not in route:
            route.append(nxt)
            nxt = self.lane(nxt).successor
        return tuple(route)

    def validate(self) -> None:
        ids = [ln.id for ln in self.lanes]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate lane ids")
        for ln in self.lanes:
            if not ln.length > 0:
                raise ConfigurationError(f"lane {ln.id} has non-positive length")
            if ln.successor is not None and ln.successor not in ids:
                raise ConfigurationError(f"lane {ln.id} links to unknown {ln.successor}")
        if self.closed and (self.inflows or self.outflow_lanes):
            raise ConfigurationError("closed systems cannot have inflows or outflows")
        if not self.closed:
            for inf in self.inflows:
                route = self.route_from(inf.lane)
                if self.lane(route[-1]).successor is not None or route[-1] not in self.outflow_lanes:
                    raise ConfigurationError(f"route from {inf.lane} does not reach an outflow")


def _as_tuple(density) -> tuple[float, ...]:
    if isinstance(density, (list, tuple)):
        return tuple(float(x) for x in density)
    return (float(density),)


def _check_range(system: System, values: tuple[float, ...]) -> None:
    lo, hi = DENSITY_RANGE[system]
    want = 2 if system is System.INTERSECTION else 1
    if len(values) != want:
        raise ConfigurationError(f"{system.value} takes {want} density value(s), got {values}")
    for x in values:
        if not (lo <= x <= hi) or not math.isfinite(x):
            raise ConfigurationError(f"{system.value} density {x} outside [{lo}, {hi}]")
    if system is System.INTERSECTION and sum(values) < INTERSECTION_MIN_SUM:
        raise ConfigurationError(
            f"intersection needs F_H + F_V >= {INTERSECTION_MIN_SUM:g}, got {sum(values):g}")


def _ring_positions(n: int, length: float, offset: float = 0.0) -> list[float]:
    return [(offset + k * length / n) % length for k in range(n)]


def random_ring_positions(rng: np.random.Generator, n: int, length: float, start: float,
                          min_gap: float) -> np.ndarray:
    """``n`` positions on a cyclic lane, first at ``start``, with bumper gaps
    drawn uniformly from the simplex of gaps that are all at least ``min_gap``."""
    slack = length - n * (VEHICLE_LENGTH + min_gap)
    if slack < 0:
        raise ConfigurationError("lane too short for the requested vehicles")
    gaps = min_gap + slack * rng.dirichlet(np.ones(n))
    offs = np.concatenate([[0.0], np.cumsum(gaps[:-1] + VEHICLE_LENGTH)])
    return np.mod(start + offs, length)


def figure_eight_length(radius: float) -> float:
    """Total cyclic length: two loops of 2R straight plus a 270 degree arc of radius R."""
    return 2.0 * (2.0 * radius + 1.5 * math.pi * radius)


def _figure_eight_positions(total: float, n: int, boxes: list[tuple[float, float]]):
    spacing = total / n
    for k in range(int(spacing / 0.25) + 1):
        offset = k * 0.25
        pos = _ring_positions(n, total, offset)
        ok = True
        for p in pos:
            rear = p - VEHICLE_LENGTH
            for lo, hi in boxes:
                if rear < hi and p > lo:
                    ok = False
        if ok:
            return pos
    raise ConfigurationError("could not place vehicles clear of the crossing")


def build_network(system, density_param) -> NetworkSpec:
    """Topology and initial/inflow configuration for one density setting."""
    system = System.parse(system)
    values = _as_tuple(density_param)
    _check_range(system, values)
    if system is System.SINGLE_RING:
        (c,) = values
        pos = _ring_positions(22, c)
        spec = NetworkSpec(
            system, values, (Lane("ring", c, "ring"),), dt=0.1,
            initial=tuple(("ring", p, k == 0) for k, p in enumerate(pos)), random_gaps=True,
        )
    elif system is System.DOUBLE_RING:
        (c,) = values
        outer = _ring_positions(22, c)
        inner = _ring_positions(22, c, offset=c / 44)
        init = [("outer", p, k == 0) for k, p in enumerate(outer)]
        init += [("inner", p, False) for p in inner]
        spec = NetworkSpec(
            system, values, (Lane("outer", c, "outer", group=1), Lane("inner", c, "inner", group=1)),
            dt=0.1, initial=tuple(init), random_gaps=True,
        )
    elif system is System.FIGURE_EIGHT:
        (r,) = values
        total = figure_eight_length(r)
        half = BOX_SIDE / 2
        h_center = r
        v_center = total / 2 + r
        boxes = [(h_center - half, h_center + half), (v_center - half, v_center + half)]
        pos = _figure_eight_positions(total, 14, boxes)
        zone = ConflictZone((
            ConflictMember("loop", boxes[0][0], boxes[0][1], "h"),
            ConflictMember("loop", boxes[1][0], boxes[1][1], "v"),
        ))
        spec = NetworkSpec(
            system, values, (Lane("loop", total, "loop"),), dt=0.1,
            conflict_zones=(zone,),
            initial=tuple(("loop", p, k == 0) for k, p in enumerate(pos)),
        )
    elif system is System.BOTTLENECK:
        (total_rate,) = values
        per_lane = total_rate / 4
        lanes = tuple(Lane(f"in{k}", 100.0, "mid0" if k < 2 else "mid1") for k in range(4))
        lanes += (Lane("mid0", 100.0, "out"), Lane("mid1", 100.0, "out"), Lane("out", 50.0, None))
        spec = NetworkSpec(
            system, values, lanes, dt=0.5,
            merges=(Merge(("in0", "in1"), "mid0"), Merge(("in2", "in3"), "mid1"),
                    Merge(("mid0", "mid1"), "out")),
            inflows=tuple(Inflow(f"in{k}", per_lane, av_every=5) for k in range(4)),
            outflow_lanes=("out",),
        )
    elif system is System.RAMP:
        (rate,) = values
        lanes = (
            Lane("highway", 400.0, "merge_highway"),
            Lane("merge_highway", 100.0, "exit"),
            Lane("ramp", 100.0, "merge_ramp"),
            Lane("merge_ramp", 100.0, "exit"),
            Lane("exit", 30.0, None),
        )
        spec = NetworkSpec(
            system, values, lanes, dt=0.5,
            merges=(Merge(("merge_highway", "merge_ramp"), "exit"),),
            inflows=(Inflow("highway", rate, av_every=10), Inflow("ramp", 300.0, av_every=0)),
            outflow_lanes=("exit",),
        )
    else:
        f_h, f_v = values
        seg = 100.0
        length = 2 * seg + BOX_SIDE
        names = (("eastbound", "h", f_h), ("westbound", "h", f_h),
                 ("northbound", "v", f_v), ("southbound", "v", f_v))
        lanes = tuple(Lane(n, length, None) for n, _, _ in names)
        zone = ConflictZone(tuple(ConflictMember(n, seg, seg + BOX_SIDE, ax) for n, ax, _ in names))
        spec = NetworkSpec(
            system, values, lanes, dt=0.5, conflict_zones=(zone,),
            inflows=tuple(Inflow(n, rate, av_every=3) for n, _, rate in names),
            outflow_lanes=tuple(n for n, _, _ in names),
        )
    spec.validate()
    return spec
