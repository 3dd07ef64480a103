"""Small world builders shared by the tests."""
from dataclasses import replace

from mixtraffic.sim.network import Inflow, Lane, NetworkSpec, System, build_network
from mixtraffic.sim.params import IdmParams
from mixtraffic.sim.world import WorldState


def ring_world(positions, speeds=None, length=250.0, av=(), noise_std=0.2, seed=0):
    """Single-lane ring with vehicles at the given positions (humans unless listed in ``av``)."""
    base = build_network("single_ring", 250)
    spec = replace(base, lanes=(Lane("ring", length, "ring"),), random_gaps=False,
                   initial=tuple(("ring", float(p), k in av) for k, p in enumerate(positions)))
    w = WorldState(spec, seed=seed, idm=IdmParams(noise_std=noise_std))
    if speeds is not None:
        w.speed[:] = speeds
    return w


def line_spec(rate=3600.0, length=1000.0):
    """One open lane fed by a single inflow; vehicles leave at its end."""
    return NetworkSpec(System.BOTTLENECK, (rate,), (Lane("road", length, None),), dt=0.5,
                       inflows=(Inflow("road", rate),), outflow_lanes=("road",))
