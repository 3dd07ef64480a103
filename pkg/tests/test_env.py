import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import ring_world
from mixtraffic.env.core import (UNCONTROLLED, AgentAction, EnvConfig, Objective, action_accel,
                                 bang_value, compute_reward, env_step, reset)
from mixtraffic.env.observe import chains, obs_dims, obs_scale, observe
from mixtraffic.sim import world as W
from mixtraffic.sim.network import build_network
from mixtraffic.sim.params import ConfigurationError, ContractViolation

SYSTEMS = [("single_ring", 250), ("double_ring", 250), ("figure_eight", 30),
           ("bottleneck", 2600), ("ramp", 2000), ("intersection", (700, 700))]


def _joint(world, act=UNCONTROLLED):
    return {vid: act for vid in world.av_ids()}


# ------------------------------------------------------------------ config
def test_config_defaults():
    c = EnvConfig("single_ring", 250)
    assert c.dt == 0.1 and c.h0 == 1000 and c.horizon == 10000
    assert c.objective is Objective.GLOBAL
    o = EnvConfig("bottleneck", 2600)
    assert o.dt == 0.5 and o.objective is Objective.OUTFLOW and o.discrete


@pytest.mark.parametrize("kwargs", [dict(lambda_collision=-1), dict(dt=0.5), dict(h0=-1),
                                    dict(c_accel=0)])
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ConfigurationError):
        EnvConfig("single_ring", 250, **kwargs)


# ------------------------------------------------------------------- reset
def test_reset_runs_warmup():
    c = EnvConfig("single_ring", 250, h0=50)
    w = reset(c, seed=1)
    assert w.n == 22 and w.t == pytest.approx(50 * 0.1)


def test_reset_is_deterministic():
    c = EnvConfig("ramp", 2000, h0=100)
    a, b = reset(c, seed=5), reset(c, seed=5)
    assert np.array_equal(a.pos, b.pos) and np.array_equal(a.speed, b.speed)


def test_reset_propagates_bad_density():
    with pytest.raises(ConfigurationError):
        reset(EnvConfig("single_ring", 300))


def test_bottleneck_warmup_builds_a_queue():
    c = EnvConfig("bottleneck", 2600)
    w = reset(c, seed=0)
    upstream = w.lane != w.topo.index["out"]
    assert (w.speed[upstream] < 1.0).sum() >= 3


# ----------------------------------------------------------------- rewards
def _fake(speeds, kinds=None, exited=0, collided=0):
    w = ring_world(np.arange(len(speeds)) * 20.0, speeds=speeds)
    if kinds is not None:
        w.kind[:] = kinds
    w.exited_last, w.collided_last = exited, collided
    return w


def test_global_reward_is_mean_speed():
    c = EnvConfig("single_ring", 250)
    assert compute_reward(c, None, _fake([1.0, 2.0, 3.0])) == 2.0


def test_outflow_reward_with_collision_penalty():
    c = EnvConfig("bottleneck", 2000, lambda_collision=50)
    assert compute_reward(c, None, _fake([1.0, 1.0], exited=2, collided=1)) == -48.0


def test_greedy_reward_is_av_speed():
    c = EnvConfig("single_ring", 250, objective="greedy")
    w = _fake([7.3, 1.0, 9.0], kinds=[W.AV, W.HUMAN, W.HUMAN])
    assert compute_reward(c, None, w) == 7.3


def test_global_rewards_integrate_to_distance():
    c = EnvConfig("single_ring", 240, h0=0)
    w = reset(c, seed=2)
    total, dist = 0.0, 0.0
    for k in range(3000):
        before = w.pos.copy()
        r = env_step(c, w, _joint(w, AgentAction(0.5 if k % 50 < 25 else -0.5)), need_obs=False)
        total += r.reward
        dist += np.mod(w.pos - before, 240.0).sum()
    assert total * c.dt * 22 == pytest.approx(dist, rel=1e-6)


def test_outflow_rewards_sum_to_outflow_count():
    c = EnvConfig("bottleneck", 2600, h0=0, lambda_collision=0.0)
    w = reset(c, seed=3)
    total = 0.0
    for _ in range(1500):
        total += env_step(c, w, _joint(w), need_obs=False).reward
    assert total == w.outflow_count


# --------------------------------------------------------------- env_step
def test_zero_command_preserves_equilibrium():
    c = EnvConfig("single_ring", 250, idm=W.IdmParams(noise_std=0.0))
    v = W.equilibrium_speed(250, 22)
    w = ring_world(np.arange(22) * 250 / 22, speeds=np.full(22, v), av=(0,), noise_std=0.0)
    for _ in range(500):
        env_step(c, w, {0: AgentAction(0.0)}, need_obs=False)
    assert np.max(np.abs(w.speed - v)) < 1e-9


def test_forced_collision_is_terminal():
    c = EnvConfig("single_ring", 250)
    w = ring_world([0.0, 5.5, 100.0], speeds=[20.0, 0.0, 0.0], av=(0,))
    w.b_cap = 0.0  # safety cannot brake
    res = env_step(c, w, {0: AgentAction(2.6)})
    assert res.terminal and res.info["collisions"] == 2
    assert res.reward == pytest.approx(np.mean(w.speed) - 50.0 * 2)


def test_bang_off_bang_mapping():
    c = EnvConfig("bottleneck", 2000)
    assert [bang_value(c, k) for k in range(3)] == [-4.5, 0.0, 2.6]
    assert action_accel(c, AgentAction(2)) == 2.6
    with pytest.raises(ContractViolation):
        bang_value(c, 3)
    with pytest.raises(ContractViolation):
        action_accel(c, AgentAction(0.5))


def test_continuous_commands_are_bounded():
    c = EnvConfig("single_ring", 250)
    assert action_accel(c, AgentAction(10.0)) == 2.6
    assert action_accel(c, AgentAction(-10.0)) == -4.5
    with pytest.raises(ContractViolation):
        action_accel(c, AgentAction(float("nan")))


def test_joint_action_must_cover_exactly_the_avs():
    c = EnvConfig("single_ring", 250, h0=0)
    w = reset(c)
    with pytest.raises(ContractViolation):
        env_step(c, w, {})
    with pytest.raises(ContractViolation):
        env_step(c, w, {0: UNCONTROLLED, 1: UNCONTROLLED})


def test_lateral_only_on_double_ring():
    c = EnvConfig("single_ring", 250, h0=0)
    w = reset(c)
    with pytest.raises(ContractViolation):
        env_step(c, w, {w.av_ids()[0]: AgentAction(0.0, 0)})
    d = EnvConfig("double_ring", 250, h0=0)
    w = reset(d)
    with pytest.raises(ContractViolation):
        env_step(d, w, {w.av_ids()[0]: AgentAction(0.0, 5)})


def test_step_result_info():
    c = EnvConfig("ramp", 2000, h0=200)
    w = reset(c, seed=1)
    res = env_step(c, w, _joint(w))
    assert set(res.info) == {"outflow", "collisions", "mean_speed"}
    assert np.isfinite(res.reward) and not res.terminal
    assert set(res.observations) == set(w.av_ids())


# ------------------------------------------------------------ observations
def test_single_ring_observation_example():
    w = ring_world([0.0, 15.0, 100.0], speeds=[5.0, 6.0, 0.0], av=(0,))
    o = observe(EnvConfig("single_ring", 250), w, 0)
    assert list(o.values) == [5.0, 10.0, 6.0] and o.presence.size == 0


def test_observe_requires_present_av():
    w = ring_world([0.0, 15.0], av=(0,))
    c = EnvConfig("single_ring", 250)
    with pytest.raises(ContractViolation):
        observe(c, w, 1)
    with pytest.raises(ContractViolation):
        observe(c, w, 9)


def test_ramp_without_ramp_follower_pads_with_zeros():
    c = EnvConfig("ramp", 2000)
    w = W.WorldState(build_network("ramp", 2000), seed=0)
    av = w.add_vehicle("highway", 200.0, 10.0, W.AV)
    o = observe(c, w, av)
    assert list(o.values[5:]) == [0.0, 0.0] and o.presence[2] == 0.0
    assert o.presence[0] == 0.0 and o.values[1] == 0.0


def _chain_oracle(pos, kind, start):
    """Closest chain on one lane by brute force: the AV nearest the box and
    the rearmost uncontrolled vehicle before the next AV behind it."""
    n = len(pos)
    heads = [j for j in range(n) if kind[j] == W.AV and pos[j] <= start]
    if not heads:
        return None
    h = max(heads, key=lambda j: pos[j])
    behind_avs = [pos[j] for j in heads if pos[j] < pos[h]]
    floor = max(behind_avs) if behind_avs else -np.inf
    members = [j for j in range(n) if floor < pos[j] <= pos[h]]
    t = min(members, key=lambda j: pos[j])
    return h, t


@given(st.lists(st.tuples(st.floats(0.0, 99.0), st.booleans()), min_size=1, max_size=6,
                unique_by=lambda x: round(x[0], 3)))
def test_intersection_chains_match_brute_force(scene):
    c = EnvConfig("intersection", (700, 700))
    w = W.WorldState(build_network("intersection", (700, 700)), seed=0)
    ids = [w.add_vehicle("eastbound", p, 3.0 + k, W.AV if av else W.HUMAN)
           for k, (p, av) in enumerate(scene)]
    lane = w.topo.index["eastbound"]
    start = 100.0
    got = chains(w, lane, start)
    want = _chain_oracle(w.pos, w.kind, start)
    if want is None:
        assert got == []
        return
    assert got[0] == want
    o = observe(c, w, ids[want[0]])
    h, t = want
    slot = 2  # eastbound is the first approach
    assert list(o.values[slot:slot + 4]) == [start - w.pos[h], w.speed[h], start - w.pos[t],
                                             w.speed[t]]
    assert o.presence[0] == 1.0 and list(o.presence[1:]) == [0.0, 0.0, 0.0]


@pytest.mark.parametrize("system,density", SYSTEMS)
def test_observation_dimension_constant_and_flags_binary(system, density):
    c = EnvConfig(system, density, h0=0)
    w = reset(c, seed=4)
    n_val, n_pres = obs_dims(system)
    assert obs_scale(system).shape == (n_val,)
    seen = 0
    for _ in range(400):
        res = env_step(c, w, _joint(w))
        for o in res.observations.values():
            assert o.values.shape == (n_val,) and o.presence.shape == (n_pres,)
            assert set(np.unique(o.presence)) <= {0.0, 1.0}
            assert np.all(np.isfinite(o.values))
            seen += 1
        if res.terminal:
            break
    assert seen > 0


def test_figure_eight_orders_by_signed_crossing_distance():
    c = EnvConfig("figure_eight", 30, h0=100)
    w = reset(c, seed=0)
    av = w.av_ids()[0]
    o = observe(c, w, av)
    offsets = o.values[2::2]
    assert np.all(np.diff(offsets) >= 0)


def test_double_ring_observation_layout():
    c = EnvConfig("double_ring", 250, h0=100)
    w = reset(c, seed=0)
    av = w.av_ids()[0]
    o = observe(c, w, av)
    assert o.values[1] == w.lane[w.index_of(av)]
    assert o.values[2] >= 0 and o.values[4] <= 0  # leader ahead, follower behind


@pytest.mark.parametrize("seed", range(3))
def test_av_commands_never_cause_same_lane_overlap(seed):
    c = EnvConfig("single_ring", 230, h0=0)
    w = reset(c, seed=seed)
    r = np.random.default_rng(seed)
    for _ in range(2000):
        res = env_step(c, w, _joint(w, AgentAction(float(r.choice([-4.5, 2.6])))),
                       need_obs=False)
        assert not res.terminal
        assert np.all(w.leaders()[1] >= 0)


@pytest.mark.parametrize("chains_per_lane", [1, 2, 3])
def test_scale_matches_dimension_for_any_chain_count(chains_per_lane):
    n_val, n_pres = obs_dims("intersection", chains_per_lane)
    assert obs_scale("intersection", chains_per_lane).shape == (n_val,)
    assert n_pres == 4 * chains_per_lane
    c = EnvConfig("intersection", (700, 700), h0=200, chains_per_lane=chains_per_lane)
    w = reset(c, seed=0)
    for vid in w.av_ids():
        o = observe(c, w, vid)
        assert o.values.shape == (n_val,) and o.presence.shape == (n_pres,)
