"""Mutable simulation state and the per-step pipeline.

Vehicles are stored as parallel numpy arrays in spawn order (ids ascending);
per-lane position order is recovered by sorting when needed.  One call to
:func:`step` runs: leader search, virtual-leader constraints (merges,
crossings, turn signals), acceleration with safety clip, integration,
inflow/outflow and collision detection.
"""
from dataclasses import dataclass

import numpy as np

from .. import kernels
from .network import NetworkSpec, System, random_ring_positions
from .params import (B_CAP, VEHICLE_LENGTH, ContractViolation, DomainError, IdmParams)

HUMAN, AV = 0, 1
KIND_NAMES = ("human", "av")
NO_SIGNAL = -1
NOISE_BLOCK = 4096

# Junction behaviour of uncontrolled vehicles on the yielding axis.
STOP_SPEED = 1.0  # counts as stopped at the line below this speed (m/s)
STOP_REACH = 2.0  # extra distance past s0 that still counts as "at the line" (m)
CROSS_MARGIN = 1.0  # required time gap to approaching crossing traffic (s)
COMMIT_MARGIN = 2.0  # distance slack when deciding a vehicle can no longer stop (m)
PATIENCE = 4.0  # after waiting this long at the line, go unless a foe cannot stop (s)


class NoiseStream:
    """Standard normal draws consumed sequentially, independent of chunking."""

    def __init__(self, seed_seq: np.random.SeedSequence, block: int = NOISE_BLOCK):
        self._rng = np.random.Generator(np.random.PCG64(seed_seq))
        self._block = block
        self._buf = np.empty(0)
        self._i = 0

    def take(self, n: int) -> np.ndarray:
        out = np.empty(n)
        filled = 0
        while filled < n:
            if self._i == self._buf.size:
                self._buf = self._rng.standard_normal(max(self._block, n - filled))
                self._i = 0
            k = min(n - filled, self._buf.size - self._i)
            out[filled:filled + k] = self._buf[self._i:self._i + k]
            self._i += k
            filled += k
        return out


@dataclass(frozen=True)
class VehicleState:
    id: int
    kind: str
    lane: str
    pos: float
    speed: float
    length: float
    route: tuple
    signal: str | None
    entered_at: float


@dataclass(frozen=True)
class CollisionEvent:
    ids: tuple
    time: float
    lane: str
    pos: float


class Topology:
    """Index-based view of a NetworkSpec used by the hot path."""

    def __init__(self, spec: NetworkSpec):
        self.lane_ids = [ln.id for ln in spec.lanes]
        self.index = {lid: k for k, lid in enumerate(self.lane_ids)}
        self.n_lanes = len(self.lane_ids)
        self.length = np.array([ln.length for ln in spec.lanes])
        self.succ = np.array([-1 if ln.successor is None else self.index[ln.successor]
                              for ln in spec.lanes])
        self.cyclic = self.succ == np.arange(self.n_lanes)
        self.group = np.array([ln.group for ln in spec.lanes])
        self.merges = [([self.index[f] for f in m.feeders], self.index[m.target])
                       for m in spec.merges]
        self.zones = []
        for z in spec.conflict_zones:
            members = [(self.index[m.lane], m.start, m.end, m.axis) for m in z.members]
            self.zones.append((members, z.priority))
        # distance from each lane's start to the end of its last merge feeder
        self.inflow_lanes = [self.index[f.lane] for f in spec.inflows]


def initial_placement(spec: NetworkSpec, place_ss, min_gap: float):
    """Initial (lane, pos, is_av) entries; rings get seed-dependent random gaps
    with each lane's first vehicle kept at its nominal position."""
    if not spec.random_gaps:
        return list(spec.initial)
    rng = np.random.Generator(np.random.PCG64(place_ss))
    out = []
    for ln in spec.lanes:
        entries = [e for e in spec.initial if e[0] == ln.id]
        if not entries:
            continue
        pos = random_ring_positions(rng, len(entries), ln.length, entries[0][1], min_gap)
        out += [(ln.id, float(p), e[2]) for p, e in zip(pos, entries)]
    return out


class WorldState:
    """All dynamic state of one simulation."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, idm: IdmParams | None = None,
                 b_cap: float = B_CAP):
        self.spec = spec
        self.topo = Topology(spec)
        self.idm = idm or IdmParams()
        self.b_cap = float(b_cap)
        self.dt = spec.dt
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        noise_ss, aux_ss, place_ss = ss.spawn(3)
        self.noise = NoiseStream(noise_ss)
        self.rng = np.random.Generator(np.random.PCG64(aux_ss))
        self.step_count = 0
        self.ids = np.zeros(0, dtype=np.int64)
        self.kind = np.zeros(0, dtype=np.int8)
        self.lane = np.zeros(0, dtype=np.int64)
        self.pos = np.zeros(0)
        self.speed = np.zeros(0)
        self.accel = np.zeros(0)
        self.signal = np.zeros(0, dtype=np.int64)
        self.entered = np.zeros(0)
        self.cleared = np.zeros(0, dtype=np.int64)
        self.waited = np.zeros(0)
        self.next_id = 0
        self.outflow_count = 0
        self.spawned = 0
        self.dropped = 0
        self.removed_by_collision = 0
        self.collision_events: list[CollisionEvent] = []
        self.terminal = False
        self.exited_last = 0
        self.collided_last = 0
        self._contacts: set = set()
        self.version = 0  # bumped whenever vehicle arrays change
        self._leader_cache = None
        n_in = len(spec.inflows)
        self.flow_interval = np.array([3600.0 / f.rate for f in spec.inflows])
        self.flow_phase = (1.0 - self.rng.random(n_in)) * self.flow_interval
        self.flow_next = np.zeros(n_in, dtype=np.int64)
        self.flow_count = np.zeros(n_in, dtype=np.int64)
        self.flow_dropped = np.zeros(n_in, dtype=np.int64)
        for lane_id, p, is_av in initial_placement(spec, place_ss, self.idm.s0):
            self.add_vehicle(lane_id, p, 0.0, AV if is_av else HUMAN)

    # ------------------------------------------------------------------ access
    @property
    def t(self) -> float:
        return self.step_count * self.dt

    @property
    def n(self) -> int:
        return self.ids.size

    def index_of(self, vid: int) -> int:
        k = int(np.searchsorted(self.ids, vid))
        if k >= self.ids.size or self.ids[k] != vid:
            raise ContractViolation(f"unknown vehicle id {vid}")
        return k

    def av_ids(self) -> list[int]:
        return [int(v) for v in self.ids[self.kind == AV]]

    def vehicle(self, vid: int) -> VehicleState:
        k = self.index_of(vid)
        lane_id = self.topo.lane_ids[self.lane[k]]
        sig = self.signal[k]
        return VehicleState(
            id=int(vid), kind=KIND_NAMES[self.kind[k]], lane=lane_id, pos=float(self.pos[k]),
            speed=float(self.speed[k]), length=VEHICLE_LENGTH,
            route=self.spec.route_from(lane_id),
            signal=None if sig == NO_SIGNAL else self.topo.lane_ids[sig],
            entered_at=float(self.entered[k]),
        )

    def vehicles(self) -> list[VehicleState]:
        return [self.vehicle(int(v)) for v in self.ids]

    def leaders(self):
        """Cached :func:`find_leaders` for the current state."""
        if self._leader_cache is None or self._leader_cache[0] != self.version:
            self._leader_cache = (self.version, find_leaders(self))
        return self._leader_cache[1]

    def lane_order(self, lane_idx: int) -> np.ndarray:
        """Indices of vehicles on a lane sorted by position (rear first)."""
        idx = np.flatnonzero(self.lane == lane_idx)
        return idx[np.argsort(self.pos[idx], kind="stable")]

    def add_vehicle(self, lane_id: str, pos: float, speed: float, kind: int) -> int:
        vid = self.next_id
        self.next_id += 1
        self.ids = np.append(self.ids, vid)
        self.kind = np.append(self.kind, np.int8(kind))
        self.lane = np.append(self.lane, self.topo.index[lane_id])
        self.pos = np.append(self.pos, float(pos))
        self.speed = np.append(self.speed, float(speed))
        self.accel = np.append(self.accel, 0.0)
        self.signal = np.append(self.signal, NO_SIGNAL)
        self.entered = np.append(self.entered, self.t)
        self.cleared = np.append(self.cleared, -1)
        self.waited = np.append(self.waited, 0.0)
        self.version += 1
        return vid

    def _remove(self, mask: np.ndarray) -> None:
        keep = ~mask
        for name in ("ids", "kind", "lane", "pos", "speed", "accel", "signal", "entered",
                     "cleared", "waited"):
            setattr(self, name, getattr(self, name)[keep])
        self.version += 1

    def copy(self) -> "WorldState":
        import copy

        return copy.deepcopy(self)


# ---------------------------------------------------------------------- leaders
def find_leaders(world: WorldState):
    """Nearest leader of every vehicle along its route.

    Returns (leader index or -1, bumper gap or inf, leader speed).
    """
    topo = world.topo
    n = world.n
    lead = np.full(n, -1, dtype=np.int64)
    gap = np.full(n, np.inf)
    if n == 0:
        return lead, gap, np.zeros(0)
    pos = world.pos
    order = np.lexsort((pos, world.lane))
    lanes_sorted = world.lane[order]
    bounds = np.searchsorted(lanes_sorted, np.arange(topo.n_lanes + 1))
    rear = np.full(topo.n_lanes, -1, dtype=np.int64)
    for L in range(topo.n_lanes):
        s, e = bounds[L], bounds[L + 1]
        if e > s:
            rear[L] = order[s]
    lookahead = world.spec.merge_lookahead + 200.0
    for L in range(topo.n_lanes):
        s, e = bounds[L], bounds[L + 1]
        if e == s:
            continue
        idx = order[s:e]
        if e - s > 1:
            lead[idx[:-1]] = idx[1:]
            gap[idx[:-1]] = (pos[idx[1:]] - pos[idx[:-1]]) - VEHICLE_LENGTH
        front = idx[-1]
        if topo.cyclic[L]:
            first = idx[0]
            g = pos[first] - pos[front]
            if g <= 0.0:
                g = g + topo.length[L]
            lead[front] = first
            gap[front] = g - VEHICLE_LENGTH
            continue
        dist = topo.length[L] - pos[front]
        nxt = topo.succ[L]
        while nxt != -1 and dist < lookahead:
            r = rear[nxt]
            if r != -1:
                lead[front] = r
                gap[front] = (dist + pos[r]) - VEHICLE_LENGTH
                break
            dist += topo.length[nxt]
            nxt = topo.succ[nxt]
    lspeed = np.where(lead >= 0, world.speed[np.maximum(lead, 0)], 0.0)
    return lead, gap, lspeed


# ------------------------------------------------------------- virtual leaders
class Constraints:
    """Extra (gap, leader speed) pairs per vehicle.

    ``hard`` constraints bind every vehicle including controlled AVs; soft ones
    model human courtesy and only bind uncontrolled vehicles.
    """

    def __init__(self):
        self.idx: list[int] = []
        self.gap: list[float] = []
        self.speed: list[float] = []
        self.hard: list[bool] = []

    def add(self, i, gap, speed, hard):
        self.idx.append(int(i))
        self.gap.append(float(gap))
        self.speed.append(float(speed))
        self.hard.append(bool(hard))

    def __len__(self):
        return len(self.idx)

    def arrays(self):
        return (np.array(self.idx, dtype=np.int64), np.array(self.gap), np.array(self.speed),
                np.array(self.hard, dtype=bool))


def _arrival_time(d, v, a):
    """Time to cover d from speed v accelerating at a (upper bound on urgency)."""
    return (-v + np.sqrt(v * v + 2.0 * a * np.maximum(d, 0.0))) / a


def _committed(world: WorldState, d, v):
    """Moving vehicles that cannot stop comfortably (with slack) before ``d``."""
    v = np.atleast_1d(v)
    stop = kernels.stop_distance(v, world.idm.b_comf, world.dt)
    return (v > 0.1) & (stop + v * world.dt + COMMIT_MARGIN >= np.atleast_1d(d))


def _cannot_stop(world: WorldState, d, v):
    """Vehicles that would pass ``d`` even when braking at the hard cap."""
    v = np.atleast_1d(v)
    return kernels.stop_distance(v, world.b_cap, world.dt) >= np.atleast_1d(d)


def merge_constraints(world: WorldState, cons: Constraints) -> None:
    """Zipper order at merge points.

    Candidates within the look-ahead are ordered by (cannot stop, estimated
    arrival, distance); each vehicle treats the nearest earlier moving
    candidate from another feeder as its leader.
    """
    topo = world.topo
    look = world.spec.merge_lookahead
    a = world.idm.a_max
    for feeders, _target in topo.merges:
        rows = []
        for fi, L in enumerate(feeders):
            idx = np.flatnonzero(world.lane == L)
            if idx.size == 0:
                continue
            d = topo.length[L] - world.pos[idx]
            near = d <= look
            idx, d = idx[near], d[near]
            if idx.size == 0:
                continue
            o = np.argsort(d, kind="stable")
            idx, d = idx[o], d[o]
            v = world.speed[idx]
            arr = _arrival_time(d, v, a)
            arr = np.maximum.accumulate(arr + np.arange(idx.size) * 1e-6)
            com = _cannot_stop(world, d, v)
            for k in range(idx.size):
                rows.append((not com[k], arr[k], d[k], fi, idx[k]))
        if len(rows) < 2:
            continue
        rows.sort()
        for p, (_, _, d_i, f_i, i) in enumerate(rows):
            for q in range(p - 1, -1, -1):
                _, _, d_j, f_j, j = rows[q]
                if f_j == f_i:
                    continue
                if not (world.speed[j] > 0.1 or world.accel[j] > 0.0):
                    continue
                g = d_i - d_j - VEHICLE_LENGTH
                if g > 0.0:
                    cons.add(i, g, world.speed[j], True)
                else:
                    cons.add(i, d_i - VEHICLE_LENGTH, 0.0, True)
                break


def zone_state(world: WorldState):
    """Per zone: (members, priority, occupants per axis, approaching vehicles).

    A vehicle approaches only the next box along its lane (wrapping on cyclic
    lanes); approach entries are (vehicle index, member index, distance).
    """
    topo = world.topo
    out = []
    for members, priority in topo.zones:
        occupied = {"h": [], "v": []}
        approach = []
        by_lane = {}
        for m, (L, start, end, axis) in enumerate(members):
            by_lane.setdefault(L, []).append((start, end, axis, m))
        for L, mem in by_lane.items():
            mem.sort()
            idx = np.flatnonzero(world.lane == L)
            if idx.size == 0:
                continue
            p = world.pos[idx]
            inside_any = np.zeros(idx.size, dtype=bool)
            for start, end, axis, m in mem:
                inside = (p > start) & (p - VEHICLE_LENGTH < end)
                inside_any |= inside
                occupied[axis].extend(int(i) for i in idx[inside])
            starts = np.array([s for s, _, _, _ in mem])
            mids = np.array([m for _, _, _, m in mem])
            k = np.searchsorted(starts, p, side="left")
            ahead = k < len(mem)
            kk = np.minimum(k, len(mem) - 1)
            d = np.where(ahead, starts[kk] - p, starts[0] + topo.length[L] - p)
            ok = ~inside_any & (ahead | bool(topo.cyclic[L]))
            kk = np.where(ahead, kk, 0)
            approach.extend(zip(idx[ok].tolist(), mids[kk[ok]].tolist(), d[ok].tolist()))
        out.append((members, priority, occupied, approach))
    return out


def zone_constraints(world: WorldState, cons: Constraints, controlled: np.ndarray) -> None:
    """Crossing rules at conflict boxes.

    Every vehicle (AVs included) stops short of a box occupied by crossing
    traffic or promised to it (a crossing vehicle that can no longer stop or
    has been cleared to go).  Uncontrolled vehicles on the yielding axis
    also come to a near stop at the line and go once crossing traffic leaves
    enough time.
    """
    a = world.idm.a_max
    for members, priority, occupied, approach in zone_state(world):
        info = {}
        if approach:
            ai = np.array([i for i, _, _ in approach], dtype=np.int64)
            ad = np.array([d for _, _, d in approach])
            acom = _committed(world, ad, world.speed[ai])
        for k, (i, m, d) in enumerate(approach):
            if world.cleared[i] != -1 and world.cleared[i] != m:
                world.cleared[i] = -1
            info[i] = (m, d, world.speed[i], members[m][3], bool(acom[k]))
        # per axis: some vehicle on it is committed or cleared to cross
        promised_on = {"h": False, "v": False}
        for j, (mj, _, _, axj, comj) in info.items():
            if comj or world.cleared[j] == mj:
                promised_on[axj] = True
        for i, (m, d, v, axis, com) in info.items():
            other = "h" if axis == "v" else "v"
            occ = bool(occupied[other])
            promised = promised_on[other]
            if occ or (promised and not (com and axis == priority)):
                cons.add(i, d, 0.0, True)
                continue
            if axis == priority or controlled[i] or world.cleared[i] == m:
                continue
            at_line = d <= world.idm.s0 + STOP_REACH and v <= STOP_SPEED
            if at_line:
                clear_dist = d + (members[m][2] - members[m][1]) + VEHICLE_LENGTH
                t_clear = _arrival_time(clear_dist, v, a)
                ok = True
                for j, (mj, dj, vj, axj, _) in info.items():
                    if axj != other:
                        continue
                    if not (vj > 0.1 or world.accel[j] > 0.0):
                        continue
                    if dj / max(vj, 0.1) <= t_clear + CROSS_MARGIN:
                        ok = False
                        break
                if ok or world.waited[i] >= PATIENCE:
                    world.cleared[i] = m
                    world.waited[i] = 0.0
                    promised_on[axis] = True
                    continue
                world.waited[i] += world.dt
            cons.add(i, d, 0.0, False)


def signal_yield(world: WorldState) -> dict:
    """Map follower id -> signaling vehicle id for every active turn signal.

    The follower is the nearest vehicle in the signaled lane whose front is
    behind the signaler's projected position.
    """
    out = {}
    topo = world.topo
    for s in np.flatnonzero(world.signal != NO_SIGNAL):
        L = world.signal[s]
        cand = np.flatnonzero(world.lane == L)
        if cand.size == 0:
            continue
        behind = world.pos[s] - world.pos[cand]
        if topo.cyclic[L]:
            behind = np.mod(behind, topo.length[L])
        ok = (behind - VEHICLE_LENGTH) > 0.0
        if not ok.any():
            continue
        f = cand[ok][np.argmin(behind[ok])]
        out[int(world.ids[f])] = int(world.ids[s])
    return out


def _signal_constraints(world: WorldState, cons: Constraints) -> None:
    topo = world.topo
    for f_id, s_id in signal_yield(world).items():
        f, s = world.index_of(f_id), world.index_of(s_id)
        g = world.pos[s] - world.pos[f]
        if topo.cyclic[world.lane[f]]:
            g = g % topo.length[world.lane[f]]
        cons.add(f, g - VEHICLE_LENGTH, world.speed[s], False)


# ---------------------------------------------------------------- acceleration
def compute_accelerations(world: WorldState, ctrl: np.ndarray, controlled: np.ndarray,
                          leaders=None) -> np.ndarray:
    """Applied accelerations: IDM + noise for uncontrolled vehicles, commands
    for controlled ones, all passed through the safety clip."""
    p = world.idm
    lead, gap, lspeed = leaders if leaders is not None else world.leaders()
    v = world.speed
    z = world.noise.take(world.n)
    cons = Constraints()
    if world.topo.merges:
        merge_constraints(world, cons)
    if world.topo.zones:
        zone_constraints(world, cons, controlled)
    if (world.signal != NO_SIGNAL).any():
        _signal_constraints(world, cons)
    human = kernels.idm_accel(v, gap, v - lspeed, p.a_max, p.b_comf, p.v0, p.s0, p.tau,
                              p.delta_exp)
    unc = ~controlled
    if len(cons):
        ci, cg, cu, ch = cons.arrays()
        use = unc[ci]
        if use.any():
            extra = kernels.idm_accel(v[ci[use]], cg[use], v[ci[use]] - cu[use], p.a_max,
                                      p.b_comf, p.v0, p.s0, p.tau, p.delta_exp)
            np.minimum.at(human, ci[use], extra)
    human = human + p.noise_std * z
    proposed = np.where(controlled, ctrl, human)
    accel = kernels.safety_clip(proposed, v, gap, lspeed, p.b_comf, world.b_cap, world.dt)
    if len(cons):
        bind = ch | unc[ci]
        if bind.any():
            bi = ci[bind]
            clipped = kernels.safety_clip(accel[bi], v[bi], cg[bind], cu[bind], p.b_comf,
                                          world.b_cap, world.dt)
            np.minimum.at(accel, bi, clipped)
    return accel


# --------------------------------------------------------------------- advance
def _lane_neighbors(world: WorldState, L: int, pos: float, exclude: int):
    cand = np.flatnonzero(world.lane == L)
    cand = cand[cand != exclude]
    if cand.size == 0:
        return None, None
    length = world.topo.length[L]
    ahead = np.mod(world.pos[cand] - pos, length)
    behind = np.mod(pos - world.pos[cand], length)
    return cand[np.argmin(ahead)], cand[np.argmin(behind)]


def _try_lane_change(world: WorldState, i: int, target: int) -> bool:
    p = world.idm
    length = world.topo.length[target]
    lead, foll = _lane_neighbors(world, target, world.pos[i], i)
    if lead is None:
        return True
    g_lead = np.mod(world.pos[lead] - world.pos[i], length) - VEHICLE_LENGTH
    g_foll = np.mod(world.pos[i] - world.pos[foll], length) - VEHICLE_LENGTH
    if g_lead <= 0.0 or g_foll <= 0.0:
        return False
    ms = kernels.max_safe_speed(np.array([g_lead, g_foll]),
                                np.array([world.speed[lead], world.speed[i]]), p.b_comf, world.dt)
    return world.speed[i] <= ms[0] and world.speed[foll] <= ms[1]


def advance(world: WorldState, accel, lane_change=None) -> WorldState:
    """Integrate one step (semi-implicit Euler), move vehicles across lane ends,
    execute requested lane changes and remove vehicles leaving the network."""
    if isinstance(accel, dict):
        arr = np.full(world.n, np.nan)
        for vid, a in accel.items():
            arr[world.index_of(vid)] = a
        if np.isnan(arr).any():
            raise ContractViolation("acceleration missing for some vehicles")
        accel = arr
    accel = np.asarray(accel, dtype=np.float64)
    if accel.shape != (world.n,):
        raise ContractViolation("acceleration vector does not match vehicle count")
    topo = world.topo
    v_new = np.maximum(world.speed + accel * world.dt, 0.0)
    p = world.pos + v_new * world.dt
    world.speed = v_new
    world.accel = accel.copy()
    exited = np.zeros(world.n, dtype=bool)
    over = np.flatnonzero(p >= topo.length[world.lane])
    for i in over:
        L = world.lane[i]
        if topo.cyclic[L]:
            p[i] = p[i] - topo.length[L]
            continue
        while p[i] >= topo.length[L]:
            p[i] -= topo.length[L]
            L = topo.succ[L]
            if L == -1:
                exited[i] = True
                break
        if not exited[i]:
            world.lane[i] = L
            if world.cleared[i] != -1:
                world.cleared[i] = -1
    world.pos = p
    world.version += 1
    # the crossing flag is released once the vehicle has left its box
    if topo.zones:
        for i in np.flatnonzero(world.cleared != -1):
            members = topo.zones[0][0]
            _, _, end, _ = members[world.cleared[i]]
            if world.pos[i] - VEHICLE_LENGTH > end:
                world.cleared[i] = -1
    if lane_change:
        for vid, target in lane_change.items():
            i = world.index_of(vid)
            tgt = topo.index[target] if isinstance(target, str) else int(target)
            if tgt == world.lane[i]:
                world.signal[i] = NO_SIGNAL
                continue
            world.version += 1
            if topo.group[tgt] == 0 or topo.group[tgt] != topo.group[world.lane[i]]:
                raise ContractViolation(f"vehicle {vid} cannot change to lane {target}")
            elif _try_lane_change(world, i, tgt):
                world.lane[i] = tgt
                world.signal[i] = NO_SIGNAL
            else:
                world.signal[i] = tgt
    n_exit = int(exited.sum())
    world.outflow_count += n_exit
    world.exited_last = n_exit
    if n_exit:
        world._remove(exited)
    world.step_count += 1
    return world


# ----------------------------------------------------------------------- flows
def process_flows(world: WorldState, spec: NetworkSpec | None = None) -> WorldState:
    """Spawn scheduled vehicles whose entry headway is safe; drop the others."""
    spec = spec or world.spec
    if spec.closed:
        raise ContractViolation("process_flows called on a closed system")
    p = world.idm
    t_now = world.t
    for k, inflow in enumerate(spec.inflows):
        interval = world.flow_interval[k]
        while world.flow_phase[k] + world.flow_next[k] * interval <= t_now + 1e-9:
            world.flow_next[k] += 1
            L = world.topo.index[inflow.lane]
            on = np.flatnonzero(world.lane == L)
            if on.size:
                r = on[np.argmin(world.pos[on])]
                gap = world.pos[r] - VEHICLE_LENGTH
                lead_speed = world.speed[r]
            else:
                gap, lead_speed = np.inf, 0.0
            if gap < p.s0:
                world.dropped += 1
                world.flow_dropped[k] += 1
                continue
            speed = spec.depart_speed
            if np.isfinite(gap):
                safe = kernels.max_safe_speed(np.array([gap]), np.array([lead_speed]),
                                              p.b_comf, world.dt)[0]
                speed = min(speed, safe)
            c = world.flow_count[k]
            is_av = inflow.av_every > 0 and c % inflow.av_every == inflow.av_every - 1
            world.flow_count[k] += 1
            world.add_vehicle(inflow.lane, 0.0, speed, AV if is_av else HUMAN)
            world.spawned += 1
    return world


# ------------------------------------------------------------------ collisions
def detect_collisions(world: WorldState) -> list[CollisionEvent]:
    """New contacts this step: bumper overlaps and crossing-box co-occupancy.

    Closed systems become terminal; in open systems the involved vehicles
    are removed and not counted as outflow.
    """
    events = []
    contacts = set()
    lead, gap, _ = world.leaders()
    bad = np.flatnonzero((gap < 0.0) & (world.lane[np.maximum(lead, 0)] == world.lane))
    for i in bad:
        pair = tuple(sorted((int(world.ids[i]), int(world.ids[lead[i]]))))
        contacts.add(pair)
    for _members, _prio, occupied, _ in zone_state(world):
        for i in occupied["h"]:
            for j in occupied["v"]:
                contacts.add(tuple(sorted((int(world.ids[i]), int(world.ids[j])))))
    involved = set()
    for pair in sorted(contacts):
        involved.update(pair)
        if pair in world._contacts:
            continue
        k = world.index_of(pair[0])
        ev = CollisionEvent(pair, world.t, world.topo.lane_ids[world.lane[k]],
                            float(world.pos[k]))
        events.append(ev)
    world._contacts = contacts
    world.collision_events.extend(events)
    new_vehicles = set()
    for ev in events:
        new_vehicles.update(ev.ids)
    world.collided_last = len(new_vehicles)
    if events and world.spec.closed:
        world.terminal = True
    elif involved and not world.spec.closed:
        mask = np.isin(world.ids, np.array(sorted(involved), dtype=np.int64))
        world.removed_by_collision += int(mask.sum())
        world._remove(mask)
        world._contacts = set()
    return events


# ------------------------------------------------------------------------ step
def step(world: WorldState, ctrl=None, controlled=None, lane_change=None,
         signals=None) -> WorldState:
    """Advance the world one step.

    ``ctrl``/``controlled`` are arrays over current vehicles; vehicles not
    controlled drive as humans.  ``signals`` maps vehicle id -> lane id
    announced before accelerations are computed (turn signal intent).
    """
    n = world.n
    if ctrl is None:
        ctrl = np.zeros(n)
    if controlled is None:
        controlled = np.zeros(n, dtype=bool)
    if signals:
        for vid, target in signals.items():
            i = world.index_of(vid)
            tgt = world.topo.index[target] if isinstance(target, str) else int(target)
            world.signal[i] = NO_SIGNAL if tgt == world.lane[i] else tgt
    accel = compute_accelerations(world, np.asarray(ctrl, dtype=np.float64),
                                  np.asarray(controlled, dtype=bool))
    advance(world, accel, lane_change)
    if not world.spec.closed:
        process_flows(world)
    detect_collisions(world)
    return world


def idm_acceleration(v: float, gap: float, dv: float, p: IdmParams | None = None) -> float:
    """Scalar IDM acceleration (no noise).  ``gap`` must be positive."""
    p = p or IdmParams()
    if not gap > 0:
        raise DomainError(f"gap must be positive, got {gap}")
    return float(kernels.idm_accel(np.array([v]), np.array([gap]), np.array([dv]), p.a_max,
                                   p.b_comf, p.v0, p.s0, p.tau, p.delta_exp)[0])


def safety_clip(proposed: float, ego: VehicleState, leader: VehicleState | None,
                p: IdmParams | None = None, dt: float = 0.1, gap: float | None = None,
                b_cap: float = B_CAP) -> float:
    """Clip a proposed acceleration so the ego can always stop behind its leader.

    ``gap`` defaults to the same-lane bumper gap between ``ego`` and ``leader``.
    """
    p = p or IdmParams()
    if leader is None:
        g, u = np.inf, 0.0
    else:
        g = gap if gap is not None else (leader.pos - ego.pos) - leader.length
        u = leader.speed
    return float(kernels.safety_clip(np.array([proposed]), np.array([ego.speed]), np.array([g]),
                                     np.array([u]), p.b_comf, b_cap, dt)[0])


def equilibrium_speed(circumference: float, n_vehicles: int, p: IdmParams | None = None,
                      tol: float = 1e-12) -> float:
    """Uniform-flow speed on a ring: IDM acceleration is zero at equal spacing."""
    p = p or IdmParams()
    gap = circumference / n_vehicles - VEHICLE_LENGTH
    lo, hi = 0.0, p.v0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if idm_acceleration(mid, gap, 0.0, p) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


__all__ = [
    "AV", "HUMAN", "CollisionEvent", "NoiseStream", "VehicleState", "WorldState", "System",
    "advance", "detect_collisions", "equilibrium_speed", "find_leaders", "idm_acceleration",
    "process_flows", "safety_clip", "signal_yield", "step",
]
