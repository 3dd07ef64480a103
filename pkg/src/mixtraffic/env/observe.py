"""Per-system observation functions.

Values are raw SI quantities: speeds in m/s and signed offsets in metres
(positive ahead of the AV, negative behind; bumper-to-bumper along the
path).  Scaling for the network input happens in :func:`obs_scale`.
"""
from dataclasses import dataclass

import numpy as np

from ..sim import world as W
from ..sim.network import System
from ..sim.params import VEHICLE_LENGTH, ContractViolation
from ..sim.routes import distances_to_end, merge_of

SPEED_SCALE = 10.0
RANGE_SCALE = 100.0  # sensing range used to normalise offsets


@dataclass(frozen=True)
class Observation:
    values: np.ndarray
    presence: np.ndarray

    def vector(self, scale: np.ndarray | None = None) -> np.ndarray:
        v = self.values if scale is None else self.values / scale
        return np.concatenate([v, self.presence])


def obs_dims(system, chains_per_lane: int = 1) -> tuple[int, int]:
    """(number of values, number of presence flags)."""
    system = System.parse(system)
    return {
        System.SINGLE_RING: (3, 0),
        System.DOUBLE_RING: (10, 0),
        System.FIGURE_EIGHT: (28, 0),
        System.BOTTLENECK: (6, 2),
        System.RAMP: (7, 3),
        System.INTERSECTION: (2 + 16 * chains_per_lane, 4 * chains_per_lane),
    }[system]


def obs_scale(system, chains_per_lane: int = 1) -> np.ndarray:
    """Divisors applied to observation values before the policy network."""
    system = System.parse(system)
    s, r = SPEED_SCALE, RANGE_SCALE
    if system is System.SINGLE_RING:
        return np.array([s, r, s])
    if system is System.DOUBLE_RING:
        return np.array([s, 1.0] + [r, s] * 4)
    if system is System.FIGURE_EIGHT:
        return np.array([r, s] * 14)
    if system is System.BOTTLENECK:
        return np.array([s, r, r, s, r, s])
    if system is System.RAMP:
        return np.array([s, r, s, r, s, r, s])
    return np.array([r, s] + [r, s, r, s] * (4 * chains_per_lane))


def observe(cfg, world: W.WorldState, agent_id: int) -> Observation:
    i = world.index_of(agent_id)
    if world.kind[i] != W.AV:
        raise ContractViolation(f"vehicle {agent_id} is not an AV")
    fn = _OBSERVERS[world.spec.system]
    if world.spec.system is System.INTERSECTION:
        vals, pres = fn(world, i, cfg.chains_per_lane)
    else:
        vals, pres = fn(world, i)
    return Observation(np.asarray(vals, dtype=np.float64), np.asarray(pres, dtype=np.float64))


def _ring_neighbors(world, i, lane_idx):
    """Leader and follower of position ``pos[i]`` on a cyclic lane."""
    length = world.topo.length[lane_idx]
    cand = np.flatnonzero(world.lane == lane_idx)
    cand = cand[cand != i]
    ahead = np.mod(world.pos[cand] - world.pos[i], length)
    behind = np.mod(world.pos[i] - world.pos[cand], length)
    lead = cand[np.argmin(ahead)]
    foll = cand[np.argmin(behind)]
    return (ahead.min() - VEHICLE_LENGTH, world.speed[lead],
            -(behind.min() - VEHICLE_LENGTH), world.speed[foll])


def _obs_single_ring(world, i):
    lead, gap, lspeed = _leader(world, i)
    return [world.speed[i], gap, lspeed], []


def _leader(world, i):
    lead, gap, lspeed = world.leaders()
    return lead[i], gap[i], lspeed[i]


def _obs_double_ring(world, i):
    own = int(world.lane[i])
    other = 1 - own
    vals = [world.speed[i], float(own)]
    vals += list(_ring_neighbors(world, i, own))
    vals += list(_ring_neighbors(world, i, other))
    return vals, []


def crossing_offsets(world) -> np.ndarray:
    """Signed distance of every vehicle front to the nearest crossing centre."""
    members = world.topo.zones[0][0]
    total = world.topo.length[0]
    out = np.full(world.n, np.inf)
    for _, start, end, _ in members:
        c = 0.5 * (start + end)
        s = np.mod(world.pos - c + total / 2, total) - total / 2
        out = np.where(np.abs(s) < np.abs(out), s, out)
    return out


def _obs_figure_eight(world, i):
    s = crossing_offsets(world)
    others = [j for j in range(world.n) if j != i]
    others.sort(key=lambda j: (s[j], int(world.ids[j])))
    vals = [s[i], world.speed[i]]
    for j in others:
        vals += [s[j], world.speed[j]]
    return vals, []


def _merge_followers(world, i):
    """Nearest AV and human behind ``i`` (by distance to its next merge)
    among vehicles arriving through the other feeders."""
    m = merge_of(world, int(world.lane[i]))
    if m is None:
        return None
    feeders, _ = m
    own = int(world.lane[i])
    d_i = world.topo.length[own] - world.pos[i]
    best = {W.AV: None, W.HUMAN: None}
    for f in feeders:
        if f == own:
            continue
        d = distances_to_end(world, f)
        for j in np.flatnonzero(~np.isnan(d) & (d > d_i)):
            k = world.kind[j]
            if best[k] is None or d[j] < best[k][0]:
                best[k] = (d[j], j)
    return d_i, best


def _obs_bottleneck(world, i):
    vals = [world.speed[i], 0.0, 0.0, 0.0, 0.0, 0.0]
    pres = [0.0, 0.0]
    res = _merge_followers(world, i)
    if res is None:
        return vals, pres
    d_i, best = res
    vals[1] = d_i
    for slot, kind in ((0, W.AV), (1, W.HUMAN)):
        if best[kind] is not None:
            d_j, j = best[kind]
            vals[2 + 2 * slot] = -(d_j - d_i - VEHICLE_LENGTH)
            vals[3 + 2 * slot] = world.speed[j]
            pres[slot] = 1.0
    return vals, pres


def _obs_ramp(world, i):
    topo = world.topo
    vals = [world.speed[i], 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
    pres = [0.0, 0.0, 0.0]
    lead, gap, lspeed = world.leaders()
    if lead[i] >= 0:
        vals[1], vals[2], pres[0] = gap[i], lspeed[i], 1.0
    highway_route = {topo.index[x] for x in ("highway", "merge_highway", "exit")}
    foll = [j for j in np.flatnonzero(lead == i) if int(world.lane[j]) in highway_route]
    if foll:
        j = min(foll, key=lambda j: gap[j])
        vals[3], vals[4], pres[1] = -gap[j], world.speed[j], 1.0
    merge_end = topo.index["merge_highway"]
    ramp_end = topo.index["merge_ramp"]
    d_all = distances_to_end(world, merge_end)
    if np.isnan(d_all[i]):
        d_i = -(world.pos[i]) if int(world.lane[i]) == topo.index["exit"] else np.nan
    else:
        d_i = d_all[i]
    d_r = distances_to_end(world, ramp_end)
    cand = np.flatnonzero(~np.isnan(d_r) & (d_r > d_i))
    if cand.size:
        j = cand[np.argmin(d_r[cand])]
        vals[5], vals[6], pres[2] = -(d_r[j] - d_i - VEHICLE_LENGTH), world.speed[j], 1.0
    return vals, pres


def approach_distance(world, i) -> float:
    """Distance from a vehicle's front to the start of its crossing box."""
    members = world.topo.zones[0][0]
    L = int(world.lane[i])
    for lane, start, _, _ in members:
        if lane == L:
            return start - world.pos[i]
    raise ContractViolation("vehicle lane has no crossing")


def chains(world, lane_idx: int, start: float):
    """Chains approaching the box on one lane, closest first.

    A chain is an AV plus the uncontrolled vehicles directly behind it up to
    the next AV.  Returns a list of (head index, tail index).
    """
    idx = np.flatnonzero((world.lane == lane_idx) & (world.pos <= start))
    idx = idx[np.argsort(-world.pos[idx], kind="stable")]  # closest to the box first
    out = []
    head = tail = None
    for j in idx:
        if world.kind[j] == W.AV:
            if head is not None:
                out.append((head, tail))
            head = tail = j
        elif head is not None:
            tail = j
    if head is not None:
        out.append((head, tail))
    return out


def _obs_intersection(world, i, chains_per_lane=1):
    d_i = approach_distance(world, i)
    vals = [d_i, world.speed[i]]
    pres = []
    members = world.topo.zones[0][0]
    for lane, start, _, _ in members:
        found = chains(world, lane, start)
        for k in range(chains_per_lane):
            if k < len(found):
                h, t = found[k]
                vals += [start - world.pos[h], world.speed[h], start - world.pos[t], world.speed[t]]
                pres.append(1.0)
            else:
                vals += [0.0, 0.0, 0.0, 0.0]
                pres.append(0.0)
    return vals, pres


_OBSERVERS = {
    System.SINGLE_RING: _obs_single_ring,
    System.DOUBLE_RING: _obs_double_ring,
    System.FIGURE_EIGHT: _obs_figure_eight,
    System.BOTTLENECK: _obs_bottleneck,
    System.RAMP: _obs_ramp,
    System.INTERSECTION: _obs_intersection,
}
