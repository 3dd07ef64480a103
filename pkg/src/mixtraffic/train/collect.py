"""Multi-task trajectory collection."""
import logging

import numpy as np

from .. import policy as P
from ..control import stacked_obs
from ..env.core import EnvConfig, Objective, env_step, reset
from ..env.ring_batch import RingBatch
from ..sim.network import System
from .stats import RunningStats, returns_to_go
from .trpo import TrajectoryBatch

log = logging.getLogger(__name__)


def allocate(n_configs: int, B: int) -> list[int]:
    """Configuration index of each environment, balanced round-robin."""
    if n_configs < 1 or B < n_configs:
        raise ValueError("need at least one trajectory per configuration")
    return [e % n_configs for e in range(B)]


def env_seeds(seed: int, env_index: int, iteration: int):
    """World seed plus separate generators for Gaussian and categorical
    exploration noise of one environment."""
    ss = np.random.SeedSequence([int(seed), int(iteration), int(env_index)])
    world_ss, z_ss, u_ss = ss.spawn(3)
    return (int(world_ss.generate_state(1)[0]),
            (np.random.default_rng(z_ss), np.random.default_rng(u_ss)))


def episode_objective(cfg: EnvConfig, raw_rewards) -> float:
    """Raw objective of one episode: mean speed (m/s) or outflow rate (veh/hr)."""
    raw = np.asarray(raw_rewards, dtype=np.float64)
    if raw.size == 0:
        return float("nan")
    scale = 3600.0 / cfg.dt if cfg.objective is Objective.OUTFLOW else 1.0
    return float(np.mean(raw)) * scale


class _Episode:
    __slots__ = ("obs", "actions", "logp", "agent", "time", "raw")

    def __init__(self):
        self.obs, self.actions, self.logp, self.agent, self.time, self.raw = [], [], [], [], [], []


def _rollout_generic(params, cfg: EnvConfig, world_seed, rng, scale) -> _Episode:
    ep = _Episode()
    spec = params.spec
    world = reset(cfg, world_seed)
    for t in range(cfg.horizon):
        if world.terminal:
            break
        avs = world.av_ids()
        joint = {}
        if avs:
            o = stacked_obs(cfg, world, avs, scale)
            dist = P.forward(params, o)
            n = len(avs)
            a = P.sample_with(dist, rng[0].standard_normal((n, spec.n_gauss)),
                              rng[1].random((n, len(spec.heads))))
            lp = P.log_prob(dist, a)
            joint = {vid: P.to_agent_action(spec, row) for vid, row in zip(avs, a)}
            ep.obs.append(o)
            ep.actions.append(a)
            ep.logp.append(lp)
            ep.agent.append(np.asarray(avs, dtype=np.int64))
            ep.time.append(np.full(n, t, dtype=np.int64))
        ep.raw.append(env_step(cfg, world, joint, need_obs=False).reward)
    return ep


def _ring_eligible(cfgs) -> bool:
    return all(c.system is System.SINGLE_RING and c.objective in (Objective.GLOBAL, Objective.GREEDY)
               for c in cfgs) and len({(c.idm, c.b_cap, c.h0, c.horizon) for c in cfgs}) == 1


def _rollout_rings(params, cfgs, world_seeds, rngs, scale) -> list:
    """Lock-step collection on Single Ring worlds; matches the generic path."""
    cfg0 = cfgs[0]
    B = len(cfgs)
    H = cfg0.horizon
    rb = RingBatch([c.density_param[0] for c in cfgs], world_seeds, cfg0.idm, cfg0.b_cap, cfg0.dt)
    rb.warmup(cfg0.h0)
    spec = params.spec
    z = np.stack([r[0].standard_normal((H, 1, spec.n_gauss)) for r in rngs], axis=1)
    u = np.stack([r[1].random((H, 1, len(spec.heads))) for r in rngs], axis=1)
    lo = np.array([-c.c_decel for c in cfgs])
    hi = np.array([c.c_accel for c in cfgs])
    lam = np.array([c.lambda_collision for c in cfgs])
    greedy = np.array([c.objective is Objective.GREEDY for c in cfgs])
    O = np.empty((H, B, scale.size))
    A = np.empty((H, B, spec.action_dim))
    L = np.empty((H, B))
    R = np.empty((H, B))
    alive = np.ones(B, dtype=bool)
    steps = np.full(B, H)
    for t in range(H):
        o = rb.observe() / scale
        dist = P.forward(params, o)
        a = P.sample_with(dist, z[t, :, 0], u[t, :, 0])
        O[t], A[t], L[t] = o, a, P.log_prob(dist, a)
        acc = np.minimum(np.maximum(a[:, 0], lo), hi)
        acc[~alive] = np.nan
        before = rb.collided.copy()
        rb.step(acc)
        hit = rb.collided & ~before
        R[t] = np.where(greedy, rb.vel[:, 0], rb.mean_speed()) - lam * hit
        ended = alive & hit
        steps[ended] = t + 1
        alive &= ~hit
    episodes = []
    for e in range(B):
        ep = _Episode()
        T = steps[e]
        ep.obs, ep.actions, ep.logp = [O[:T, e]], [A[:T, e]], [L[:T, e]]
        ep.agent = [np.zeros(T, dtype=np.int64)]
        ep.time = [np.arange(T, dtype=np.int64)]
        ep.raw = list(R[:T, e])
        episodes.append(ep)
    return episodes


def collect_multitask(params: P.PolicyParams, cfg_list, B: int, seed: int, iteration: int,
                      stats: RunningStats, gamma: float, scale=None, fast: bool = True
                      ) -> TrajectoryBatch:
    """Roll out ``B`` trajectories spread over ``cfg_list`` and build a batch.

    Rewards are normalised in (environment, time) order with ``stats``; the
    discounted sum restarts at each episode.
    """
    alloc = allocate(len(cfg_list), B)
    cfgs = [cfg_list[k] for k in alloc]
    if scale is None:
        from ..env.observe import obs_scale

        scale = obs_scale(cfgs[0].system, cfgs[0].chains_per_lane)
    scale = np.asarray(scale, dtype=np.float64)
    seeds, rngs = zip(*(env_seeds(seed, e, iteration) for e in range(B)))
    if fast and _ring_eligible(cfgs):
        episodes = _rollout_rings(params, cfgs, seeds, rngs, scale)
    else:
        episodes = []
        for e in range(B):
            try:
                episodes.append(_rollout_generic(params, cfgs[e], seeds[e], rngs[e], scale))
            except Exception as exc:  # one bad environment must not sink the batch
                log.warning("rollout %d failed: %s", e, exc)
                episodes.append(None)
    failed = sum(ep is None for ep in episodes)
    if failed == B:
        raise RuntimeError("every environment failed during collection")
    parts = {k: [] for k in ("obs", "actions", "logp", "weights", "env", "agent", "time")}
    objectives = []
    for e, ep in enumerate(episodes):
        if ep is None:
            continue
        stats.reset_streams()
        norm = np.array([stats.update(r) for r in ep.raw])
        G = returns_to_go(norm, gamma)
        objectives.append(episode_objective(cfgs[e], ep.raw))
        if not ep.obs:
            continue
        agent = np.concatenate(ep.agent)
        time = np.concatenate(ep.time)
        order = np.lexsort((time, agent))
        parts["obs"].append(np.concatenate(ep.obs)[order])
        parts["actions"].append(np.concatenate(ep.actions)[order])
        parts["logp"].append(np.concatenate(ep.logp)[order])
        parts["weights"].append(G[time[order]])
        parts["env"].append(np.full(order.size, e, dtype=np.int64))
        parts["agent"].append(agent[order])
        parts["time"].append(time[order])
    if failed:
        log.warning("%d of %d rollouts failed and were excluded", failed, B)
    width = params.spec.in_dim
    empty = {"obs": np.zeros((0, width)), "actions": np.zeros((0, params.spec.action_dim))}
    arrays = {k: (np.concatenate(v) if v else empty.get(k, np.zeros(0))) for k, v in parts.items()}
    return TrajectoryBatch(objectives=np.array(objectives), env_configs=cfgs, failed=failed, **arrays)
