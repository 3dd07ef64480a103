import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import ring_world
from mixtraffic.control import Baseline
from mixtraffic.derived import (GATHER_SPEED, DerivedBottleneck, DerivedFigureEight,
                                DerivedIntersection, DerivedRamp, DerivedRing, GridSpec,
                                TunedEntry, box_has_uncontrolled, default_grid, derived_for,
                                equalize, equalize_many, grid_search, leaders_on_route,
                                load_tuned, make_derived, ramp_merge_distance, trailing_distance,
                                tuned_params, write_tuned)
from mixtraffic.env.core import UNCONTROLLED, EnvConfig, env_step
from mixtraffic.env.observe import approach_distance
from mixtraffic.evaluate import EvalConfig, evaluate
from mixtraffic.sim import world as W
from mixtraffic.sim.network import Lane, build_network
from mixtraffic.sim.params import VEHICLE_LENGTH


# ---------------------------------------------------------------- equalize
def test_equalize_examples():
    assert equalize(5, 3) == pytest.approx(1.95)
    assert equalize(5, 5) == 0.0
    assert equalize(5, 6) == pytest.approx(-3.375)


def test_equalize_step_cap_lands_on_target():
    assert equalize(5, 4.9, dt=0.1) == pytest.approx(1.0)
    assert equalize(5, 5.1, dt=0.1) == pytest.approx(-1.0)
    assert equalize(5, 3, dt=0.1) == pytest.approx(1.95)


@given(st.floats(0, 30), st.lists(st.floats(0, 30), min_size=1, max_size=20),
       st.sampled_from([None, 0.1, 0.5]))
def test_equalize_many_matches_scalar(target, speeds, dt):
    got = equalize_many(target, np.array(speeds), dt=dt)
    want = [equalize(target, v, dt=dt) for v in speeds]
    assert got.tolist() == want


# -------------------------------------------------------------------- ring
def _ring_cfg_world(av_speed, c=250.0):
    n = 22
    pos = np.arange(n) * c / n
    w = ring_world(pos, speeds=np.full(n, 3.0), length=c, av=(0,))
    w.speed[0] = av_speed
    return EnvConfig("single_ring", c), w


def test_ring_at_target_is_zero():
    cfg, w = _ring_cfg_world(4.0)
    (act,) = DerivedRing(4.0).act(cfg, w, 0).values()
    assert act.longitudinal == 0.0 and act.direct


def test_ring_below_target_accelerates():
    cfg, w = _ring_cfg_world(2.0)
    (act,) = DerivedRing(4.0).act(cfg, w, 0).values()
    assert act.longitudinal > 0


def test_ring_batch_accel_matches_world_accel():
    cfg, w = _ring_cfg_world(2.0)
    c = DerivedRing(3.9)
    obs = np.array([[s, 5.0, 1.0] for s in (0.0, 2.0, 3.9, 3.95, 10.0)])
    got = c.ring_accel(cfg, obs, 0)
    want = [c.accel(cfg, s) for s in obs[:, 0]]
    assert got.tolist() == want


def test_fast_ring_evaluation_equals_generic():
    cfg = EnvConfig("single_ring", 240)
    ec = EvalConfig(n_seeds=2, h0=300, h1=300, h=200)
    c = DerivedRing(3.3)
    assert evaluate(c, cfg, ec, fast=True) == evaluate(c, cfg, ec, fast=False)


@pytest.mark.parametrize("bad", [-0.1, math.nan])
def test_negative_target_rejected(bad):
    with pytest.raises(ValueError):
        DerivedRing(bad)


# ------------------------------------------------------------ figure eight
def _figure_eight(positions):
    base = build_network("figure_eight", 30)
    spec = replace(base, initial=tuple(("loop", float(p), k == 0) for k, p in enumerate(positions)))
    return W.WorldState(spec, seed=0)


def test_figure_eight_platoon_gathered_uses_target():
    total = build_network("figure_eight", 30).lanes[0].length
    av = total - 1.0
    w = _figure_eight([av] + [av - 8.0 * k for k in range(1, 14)])
    assert trailing_distance(w, 0) == pytest.approx(8.0 * 13)
    assert DerivedFigureEight(6.0).target_for(w, 0) == 6.0


def test_figure_eight_straggler_means_gather_speed():
    total = build_network("figure_eight", 30).lanes[0].length
    av = total - 1.0
    pos = [av] + [av - 8.0 * k for k in range(1, 13)] + [av - 0.6 * total]
    w = _figure_eight(pos)
    assert trailing_distance(w, 0) > total / 2
    assert DerivedFigureEight(6.0).target_for(w, 0) == GATHER_SPEED


# -------------------------------------------------------------- bottleneck
def _bottleneck(av_lane, av_pos, other_lane, other_pos, other_kind, rate=2600):
    cfg = EnvConfig("bottleneck", rate)
    w = W.WorldState(cfg.network(), seed=0)
    av = w.add_vehicle(av_lane, av_pos, 5.0, W.AV)
    w.add_vehicle(other_lane, other_pos, 5.0, other_kind)
    return cfg, w, av


def test_bottleneck_gate_leaves_avs_uncontrolled():
    cfg, w, av = _bottleneck("mid0", 70.0, "mid1", 60.0, W.HUMAN, rate=2000)
    assert DerivedBottleneck(40, 50).act(cfg, w, 0) == {av: UNCONTROLLED}


def test_bottleneck_stops_for_close_human_on_other_branch():
    cfg, w, av = _bottleneck("mid0", 70.0, "mid1", 60.0, W.HUMAN)
    assert DerivedBottleneck(40, 50).act(cfg, w, 0)[av].longitudinal == -cfg.c_decel


def test_bottleneck_goes_when_other_follower_is_av():
    cfg, w, av = _bottleneck("mid0", 70.0, "mid1", 60.0, W.AV)
    acts = DerivedBottleneck(40, 50).act(cfg, w, 0)
    assert acts[av].longitudinal == cfg.c_accel


@pytest.mark.parametrize("av_pos,other_pos", [(50.0, 40.0), (70.0, 30.0)])
def test_bottleneck_goes_outside_thresholds(av_pos, other_pos):
    # first: d_i = 50 >= x1; second: d_j = 70 >= x2
    cfg, w, av = _bottleneck("mid0", av_pos, "mid1", other_pos, W.HUMAN)
    assert DerivedBottleneck(40, 50).act(cfg, w, 0)[av].longitudinal == cfg.c_accel


def test_bottleneck_ignores_vehicles_ahead_on_other_branch():
    cfg, w, av = _bottleneck("mid0", 70.0, "mid1", 90.0, W.HUMAN)
    assert DerivedBottleneck(40, 50).act(cfg, w, 0)[av].longitudinal == cfg.c_accel


def test_bottleneck_rejects_nonpositive_thresholds():
    with pytest.raises(ValueError):
        DerivedBottleneck(0, 10)


# -------------------------------------------------------------------- ramp
def _ramp(av_lane, av_pos, leaders=0):
    cfg = EnvConfig("ramp", 2000)
    w = W.WorldState(cfg.network(), seed=0)
    av = w.add_vehicle(av_lane, av_pos, 8.0, W.AV)
    for k in range(leaders):
        w.add_vehicle("highway", av_pos + 10.0 * (k + 1), 8.0, W.HUMAN)
    return cfg, w, av


def test_ramp_gate_near_merge():
    cfg, w, av = _ramp("merge_highway", 0.0)
    assert ramp_merge_distance(w, w.index_of(av)) == pytest.approx(100.0)
    assert DerivedRamp(10.0).act(cfg, w, 0)[av] is UNCONTROLLED


def test_ramp_upstream_equalizes_to_target():
    cfg, w, av = _ramp("highway", 50.0, leaders=5)
    i = w.index_of(av)
    assert ramp_merge_distance(w, i) == pytest.approx(450.0)
    assert leaders_on_route(w, i) == 5
    got = DerivedRamp(10.0).act(cfg, w, 0)[av].longitudinal
    assert got == equalize(10.0, 8.0, cfg.c_accel, cfg.c_decel, cfg.dt)


def test_ramp_waits_behind_long_queue():
    cfg, w, av = _ramp("highway", 50.0, leaders=25)
    assert leaders_on_route(w, w.index_of(av)) == 25
    got = DerivedRamp(10.0).act(cfg, w, 0)[av].longitudinal
    assert got == equalize(0.0, 8.0, cfg.c_accel, cfg.c_decel, cfg.dt) < 0


def test_ramp_leaders_count_other_branch_after_merge():
    cfg, w, av = _ramp("highway", 50.0)
    w.add_vehicle("exit", 10.0, 8.0, W.HUMAN)
    w.add_vehicle("merge_ramp", 10.0, 8.0, W.HUMAN)  # not on the AV's route
    assert leaders_on_route(w, w.index_of(av)) == 1


# ------------------------------------------------------------ intersection
def _intersection(av_lane, d, human=None):
    cfg = EnvConfig("intersection", (700, 700))
    w = W.WorldState(cfg.network(), seed=0)
    start = w.topo.zones[0][0][0][1]
    av = w.add_vehicle(av_lane, start - d, 5.0, W.AV)
    if human is not None:
        w.add_vehicle(human, start + 2.0 + VEHICLE_LENGTH, 3.0, W.HUMAN)
    return cfg, w, av


def test_intersection_gate():
    cfg, w, av = _intersection("eastbound", 20.0)
    assert approach_distance(w, w.index_of(av)) == pytest.approx(20.0)
    assert DerivedIntersection(10, 10).act(cfg, w, 0)[av] is UNCONTROLLED


def test_intersection_green_phase_goes_when_clear():
    cfg, w, av = _intersection("eastbound", 10.0)
    assert DerivedIntersection(10, 10).act(cfg, w, 0)[av].longitudinal == cfg.c_accel


def test_intersection_red_phase_stops():
    cfg, w, av = _intersection("northbound", 10.0)
    assert DerivedIntersection(10, 10).act(cfg, w, 0)[av].longitudinal == -cfg.c_decel
    assert DerivedIntersection(10, 10).act(cfg, w, 10)[av].longitudinal == cfg.c_accel


def test_intersection_yields_to_crossing_human():
    cfg, w, av = _intersection("eastbound", 10.0, human="northbound")
    assert box_has_uncontrolled(w)
    assert DerivedIntersection(10, 10).act(cfg, w, 0)[av].longitudinal == -cfg.c_decel


def test_intersection_phase_arithmetic():
    c = DerivedIntersection(3, 2)
    assert [c.phase(k) for k in range(7)] == ["h", "h", "h", "v", "v", "h", "h"]
    with pytest.raises(ValueError):
        DerivedIntersection(0, 3)


# --------------------------------------------------------- output invariant
def _allowed(cfg, system, value):
    if value is None:
        return True
    lo, hi = -0.75 * cfg.c_decel, 0.75 * cfg.c_accel
    if system in ("bottleneck", "intersection"):
        return value in (-cfg.c_decel, cfg.c_accel)
    return lo - 1e-12 <= value <= hi + 1e-12


@pytest.mark.parametrize("system,density,params,steps", [
    ("single_ring", 250, {"v_target": 4.0}, 600),
    ("figure_eight", 30, {"v_target": 5.0}, 600),
    ("bottleneck", 2600, {"x1": 40, "x2": 60}, 400),
    ("ramp", 2000, {"v_target": 10.0}, 400),
    ("intersection", (700, 700), {"t_h": 20, "t_v": 20}, 400),
])
def test_outputs_stay_in_branch_set(system, density, params, steps):
    cfg = EnvConfig(system, density)
    w = W.WorldState(cfg.network(), seed=3)
    c = make_derived(system, params)
    c.reset(cfg, w)
    seen = 0
    for k in range(steps):
        joint = c.act(cfg, w, k)
        for act in joint.values():
            assert _allowed(cfg, system, act.longitudinal), act
            seen += act.longitudinal is not None
        env_step(cfg, w, joint, need_obs=False)
    assert seen > 0


def test_intersection_never_accelerates_into_occupied_box():
    cfg = EnvConfig("intersection", (700, 700))
    w = W.WorldState(cfg.network(), seed=1)
    c = DerivedIntersection(20, 20)
    for k in range(1500):
        joint = c.act(cfg, w, k)
        if box_has_uncontrolled(w):
            for act in joint.values():
                assert act.longitudinal is None or act.longitudinal < 0
        env_step(cfg, w, joint, need_obs=False)


# ---------------------------------------------------------- gate equivalence
def _trajectory(cfg, spec, controller, steps, seed=0):
    w = W.WorldState(spec, seed=seed, idm=cfg.idm, b_cap=cfg.b_cap)
    controller.reset(cfg, w)
    rows = []
    for k in range(steps):
        env_step(cfg, w, controller.act(cfg, w, k), need_obs=False)
        rows.append((w.ids.copy(), w.pos.copy(), w.speed.copy()))
    return rows


def _same(a, b):
    return len(a) == len(b) and all(
        np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) and np.array_equal(x[2], y[2])
        for x, y in zip(a, b))


def test_bottleneck_gate_trajectories_equal_baseline():
    cfg = EnvConfig("bottleneck", 2200)
    d = _trajectory(cfg, cfg.network(), DerivedBottleneck(40, 60), 600)
    b = _trajectory(cfg, cfg.network(), Baseline(), 600)
    assert _same(d, b)


def test_ramp_gate_trajectories_equal_baseline():
    # a 300 m approach puts every highway AV within 400 m of the merge
    cfg = EnvConfig("ramp", 2000)
    spec = cfg.network()
    spec = replace(spec, lanes=(Lane("highway", 300.0, "merge_highway"),) + spec.lanes[1:])
    d = _trajectory(cfg, spec, DerivedRamp(5.0), 600)
    b = _trajectory(cfg, spec, Baseline(), 600)
    assert _same(d, b)
    # control run: outside the gate the controller does change the trajectory
    far = _trajectory(cfg, cfg.network(), DerivedRamp(5.0), 600)
    assert not _same(far, _trajectory(cfg, cfg.network(), Baseline(), 600))


# -------------------------------------------------------------- grid search
def test_grid_search_peak():
    g = GridSpec(("x",), ((1.0, 2.0, 3.0),), n_seeds=1)
    res = grid_search(lambda p: p["x"], g, lambda x: [-(x - 2.0) ** 2])
    assert res.best == {"x": 2.0} and res.best_score == 0.0
    assert [p for p, _, _ in res.table] == [{"x": 1.0}, {"x": 2.0}, {"x": 3.0}]


def test_grid_search_ties_take_first():
    g = GridSpec(("a", "b"), ((1, 2), (3, 4)), n_seeds=1)
    res = grid_search(lambda p: p, g, lambda p: [7.0])
    assert res.best == {"a": 1, "b": 3}


def test_grid_search_failures_score_minus_inf():
    g = GridSpec(("x",), ((0.0, 1.0, 2.0),), n_seeds=1)

    def score(x):
        if x == 1.0:
            raise RuntimeError("boom")
        return [x if x != 2.0 else math.nan]

    res = grid_search(lambda p: p["x"], g, score)
    assert [m for _, m, _ in res.table] == [0.0, -math.inf, -math.inf]
    assert res.best == {"x": 0.0}


def _scan_oracle(names, cands, scores):
    """Independent exhaustive scan: first maximum in lexicographic index order."""
    best, best_val = None, None
    for idx in itertools.product(*[range(len(c)) for c in cands]):
        val = float(np.mean(scores[idx]))
        if best is None or val > best_val:
            best, best_val = idx, val
    return {n: cands[k][i] for k, (n, i) in enumerate(zip(names, best))}, best_val


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2**31 - 1),
       st.booleans())
def test_grid_search_matches_scan_oracle(shape, seed, coarse):
    rng = np.random.default_rng(seed)
    names = tuple(f"p{k}" for k in range(len(shape)))
    cands = tuple(tuple(float(x) for x in np.sort(rng.uniform(0, 10, n))) for n in shape)
    # coarse scores produce many ties
    scores = rng.integers(0, 3, size=tuple(shape) + (3,)).astype(float) if coarse \
        else rng.normal(size=tuple(shape) + (3,))
    lookup = {tuple(c[i] for c, i in zip(cands, idx)): scores[idx]
              for idx in itertools.product(*[range(n) for n in shape])}
    res = grid_search(lambda p: tuple(p[n] for n in names), GridSpec(names, cands, 3),
                      lambda key: lookup[key])
    best, val = _scan_oracle(names, cands, scores)
    assert res.best == best
    assert res.best_score == val == max(m for _, m, _ in res.table)


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(("x",), ((),))
    with pytest.raises(ValueError):
        GridSpec(("x",), ((1.0, math.inf),))
    with pytest.raises(ValueError):
        GridSpec(("x", "y"), ((1.0,),))


def test_default_grids():
    v = default_grid("single_ring").candidates[0]
    assert v[0] == 0.5 and v[-1] == 30.0 and len(v) == 119
    x1, x2 = default_grid("bottleneck").candidates
    assert x1 == x2 and x1[0] == 5.0 and x1[-1] == 100.0 and len(x1) == 20
    t_h, _ = default_grid("intersection").candidates
    assert t_h[0] * 0.5 == 2.0 and t_h[-1] * 0.5 == 30.0 and t_h[1] - t_h[0] == 2


# -------------------------------------------------------------- tuned table
def test_tuned_table_round_trip(tmp_path):
    path = tmp_path / "t.csv"
    write_tuned(path, [TunedEntry("single_ring", (250.0,), {"v_target": 3.75}, 3.8, 0.01),
                       TunedEntry("bottleneck", ("*",), {"x1": 40.0, "x2": 65.0}, 1800, 20),
                       TunedEntry("intersection", (700.0, 700.0), {"t_h": 20, "t_v": 24}, 1500, 9)])
    table = load_tuned(path)
    assert tuned_params("single_ring", 250, table) == {"v_target": 3.75}
    assert tuned_params("bottleneck", 3000, table) == {"x1": 40.0, "x2": 65.0}
    assert tuned_params("intersection", (700, 700), table) == {"t_h": 20.0, "t_v": 24.0}
    assert table[("single_ring", "250")]["score"] == 3.8
    with pytest.raises(KeyError):
        tuned_params("single_ring", 300, table)


SHIPPED = [("single_ring", c) for c in (230, 240, 250, 260, 270)] + \
    [("double_ring", c) for c in (240, 250, 260)] + \
    [("figure_eight", r) for r in (25, 30, 35)] + \
    [("bottleneck", f) for f in (2400, 2600, 3000)] + \
    [("ramp", f) for f in (1600, 2000)] + [("intersection", (700, 700))]


@pytest.mark.parametrize("system,density", SHIPPED)
def test_shipped_table_covers_defaults(system, density):
    c = derived_for(EnvConfig(system, density))
    assert c.name == "derived"


def test_shipped_ring_target_near_equilibrium():
    eq = W.equilibrium_speed(250.0, 22)
    assert abs(tuned_params("single_ring", 250)["v_target"] - eq) <= 0.25 + 1e-9
