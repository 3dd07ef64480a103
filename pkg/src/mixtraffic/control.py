"""Controllers map a world state to a joint action over the AVs present."""
import numpy as np

from . import policy as P
from .env.core import UNCONTROLLED, EnvConfig
from .env.observe import obs_scale, observe
from .sim.world import WorldState


class Controller:
    name = "controller"
    batch_ring = False  # True when ring_accel() drives lock-step Single Ring batches

    def reset(self, cfg: EnvConfig, world: WorldState) -> None:
        """Called once when the controller takes over (after warmup)."""

    def act(self, cfg: EnvConfig, world: WorldState, step: int) -> dict:
        """Joint action for every AV; ``step`` counts from the takeover."""
        raise NotImplementedError


class Baseline(Controller):
    """Every AV drives like an uncontrolled (IDM) vehicle."""

    name = "baseline"
    batch_ring = True

    def act(self, cfg, world, step):
        return {vid: UNCONTROLLED for vid in world.av_ids()}

    def ring_accel(self, cfg, obs_raw, step):
        """AV commands for a batch of Single Rings; NaN means uncontrolled."""
        return np.full(obs_raw.shape[0], np.nan)


def stacked_obs(cfg: EnvConfig, world: WorldState, avs, scale) -> np.ndarray:
    if not avs:
        return np.zeros((0, scale.size))
    return np.stack([observe(cfg, world, vid).vector(scale) for vid in avs])


class PolicyController(Controller):
    """Runs a policy network on every AV; deterministic mode uses the mean/argmax."""

    name = "policy"

    def __init__(self, params: P.PolicyParams, scale=None, deterministic: bool = True,
                 rng: np.random.Generator | None = None):
        self.params = params
        self.scale = None if scale is None else np.asarray(scale, dtype=np.float64)
        self.deterministic = deterministic
        self.rng = rng or np.random.default_rng(0)

    def reset(self, cfg, world):
        if self.scale is None:
            self.scale = obs_scale(cfg.system, cfg.chains_per_lane)

    def act(self, cfg, world, step):
        avs = world.av_ids()
        if not avs:
            return {}
        dist = P.forward(self.params, stacked_obs(cfg, world, avs, self._scale(cfg)))
        acts = P.mode(dist) if self.deterministic else P.sample(dist, self.rng)
        return {vid: P.to_agent_action(self.params.spec, row) for vid, row in zip(avs, acts)}

    @property
    def batch_ring(self):
        kinds = [(h.kind, h.size) for h in self.params.spec.heads]
        return self.deterministic and kinds == [("gaussian", 1)]

    def ring_accel(self, cfg, obs_raw, step):
        dist = P.forward(self.params, obs_raw / self._scale(cfg))
        a = P.mode(dist)[:, 0]
        return np.minimum(np.maximum(a, -cfg.c_decel), cfg.c_accel)

    def _scale(self, cfg):
        if self.scale is None:
            self.reset(cfg, None)
        return self.scale
