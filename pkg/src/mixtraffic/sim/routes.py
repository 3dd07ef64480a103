"""Path distances along lane routes."""
import numpy as np

from .world import WorldState


def lane_offsets(world: WorldState, lane_idx: int) -> dict:
    """Offset of every lane start on the route from ``lane_idx``'s start."""
    topo = world.topo
    out = {lane_idx: 0.0}
    acc = topo.length[lane_idx]
    nxt = topo.succ[lane_idx]
    while nxt != -1 and nxt not in out:
        out[nxt] = acc
        acc += topo.length[nxt]
        nxt = topo.succ[nxt]
    return out


def distance_to_end(world: WorldState, i: int, end_lane: int) -> float | None:
    """Distance from vehicle ``i``'s front to the end of ``end_lane``; None if
    that lane is not on the vehicle's route."""
    offs = lane_offsets(world, int(world.lane[i]))
    if end_lane not in offs:
        return None
    return offs[end_lane] + world.topo.length[end_lane] - world.pos[i]


def distances_to_end(world: WorldState, end_lane: int) -> np.ndarray:
    """Vectorised :func:`distance_to_end`; NaN where not on route."""
    topo = world.topo
    table = np.full(topo.n_lanes, np.nan)
    for L in range(topo.n_lanes):
        offs = lane_offsets(world, L)
        if end_lane in offs:
            table[L] = offs[end_lane] + topo.length[end_lane]
    return table[world.lane] - world.pos


def merge_of(world: WorldState, lane_idx: int):
    """(feeder lanes, target) of the merge fed by ``lane_idx``, or None."""
    for feeders, target in world.topo.merges:
        if lane_idx in feeders:
            return feeders, target
    return None


def final_merge(world: WorldState):
    """The merge whose target leaves the network (last merge on every route)."""
    topo = world.topo
    for feeders, target in topo.merges:
        if topo.succ[target] == -1:
            return feeders, target
    return None
