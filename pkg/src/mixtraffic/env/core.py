"""Environment semantics: configuration, actions, rewards, reset and step."""
import enum
from dataclasses import dataclass, field

import numpy as np

from ..sim import world as W
from ..sim.network import NetworkSpec, System, build_network
from ..sim.params import B_CAP, ConfigurationError, ContractViolation, IdmParams
from .observe import Observation, observe


class Objective(str, enum.Enum):
    GLOBAL = "global"
    GREEDY = "greedy"
    OUTFLOW = "outflow"

    @classmethod
    def parse(cls, name) -> "Objective":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            raise ConfigurationError(f"unknown objective {name!r}") from None


DISCRETE_SYSTEMS = (System.BOTTLENECK, System.RAMP, System.INTERSECTION)


def default_objective(system: System) -> Objective:
    return Objective.GLOBAL if system.closed else Objective.OUTFLOW


@dataclass(frozen=True)
class EnvConfig:
    system: System
    density_param: tuple
    objective: Objective | None = None
    lambda_collision: float = 50.0
    h0: int | None = None  # warmup steps; default 100 s
    horizon: int | None = None  # default 1000 s
    dt: float | None = None  # fixed by the system
    c_accel: float = 2.6
    c_decel: float = 4.5
    idm: IdmParams = field(default_factory=IdmParams)
    b_cap: float = B_CAP
    chains_per_lane: int = 1

    def __post_init__(self):
        sys_ = System.parse(self.system)
        object.__setattr__(self, "system", sys_)
        dens = self.density_param
        dens = tuple(float(x) for x in dens) if isinstance(dens, (tuple, list)) else (float(dens),)
        object.__setattr__(self, "density_param", dens)
        spec_dt = 0.1 if sys_.closed else 0.5
        if self.dt is not None and abs(self.dt - spec_dt) > 1e-12:
            raise ConfigurationError(f"{sys_.value} runs at dt={spec_dt}")
        object.__setattr__(self, "dt", spec_dt)
        obj = default_objective(sys_) if self.objective is None else Objective.parse(self.objective)
        object.__setattr__(self, "objective", obj)
        if self.h0 is None:
            object.__setattr__(self, "h0", int(round(100.0 / spec_dt)))
        if self.horizon is None:
            object.__setattr__(self, "horizon", int(round(1000.0 / spec_dt)))
        if self.lambda_collision < 0:
            raise ConfigurationError("lambda_collision must be >= 0")
        if self.h0 < 0 or self.horizon < 0:
            raise ConfigurationError("h0 and horizon must be >= 0")
        if not (self.c_accel > 0 and self.c_decel > 0):
            raise ConfigurationError("action bounds must be positive")
        if self.chains_per_lane < 1:
            raise ConfigurationError("chains_per_lane must be >= 1")

    @property
    def discrete(self) -> bool:
        return self.system in DISCRETE_SYSTEMS

    @property
    def lateral(self) -> bool:
        return self.system is System.DOUBLE_RING

    def network(self) -> NetworkSpec:
        return build_network(self.system, self.density_param)

    def with_density(self, density) -> "EnvConfig":
        from dataclasses import replace

        return replace(self, density_param=density)


@dataclass(frozen=True)
class AgentAction:
    """One AV's action.

    ``longitudinal`` is an acceleration (continuous systems), an index into
    (-c_decel, 0, +c_accel) (discrete systems), or None to let the vehicle
    drive like a human.  ``lateral`` is a lane index (Double Ring only).
    ``direct`` marks a plain acceleration command in any system; rule-based
    controllers use it, learned policies never do.
    """

    longitudinal: float | int | None
    lateral: int | None = None
    direct: bool = False


UNCONTROLLED = AgentAction(None)


def bang_value(cfg: EnvConfig, index: int) -> float:
    if index not in (0, 1, 2):
        raise ContractViolation(f"discrete action index {index} not in {{0, 1, 2}}")
    return (-cfg.c_decel, 0.0, cfg.c_accel)[index]


def action_accel(cfg: EnvConfig, act: AgentAction) -> float | None:
    """Commanded acceleration for an action (None: uncontrolled)."""
    lon = act.longitudinal
    if lon is None:
        return None
    if cfg.discrete and not act.direct:
        if isinstance(lon, (float, np.floating)) and not float(lon).is_integer():
            raise ContractViolation(f"discrete action expected, got {lon}")
        return bang_value(cfg, int(lon))
    lon = float(lon)
    if not np.isfinite(lon):
        raise ContractViolation("non-finite acceleration command")
    return min(max(lon, -cfg.c_decel), cfg.c_accel)


@dataclass
class StepResult:
    observations: dict
    reward: float
    terminal: bool
    info: dict


def reset(cfg: EnvConfig, seed: int = 0, spec: NetworkSpec | None = None) -> W.WorldState:
    """Build the network and run ``h0`` warmup steps with every vehicle uncontrolled."""
    world = W.WorldState(spec or cfg.network(), seed=seed, idm=cfg.idm, b_cap=cfg.b_cap)
    for _ in range(cfg.h0):
        W.step(world)
        if world.terminal:
            break
    return world


def compute_reward(cfg: EnvConfig, world_before, world_after) -> float:
    """Per-step reward; the episode sum is the objective minus collision penalties."""
    if cfg.objective is Objective.GLOBAL:
        base = float(np.mean(world_after.speed)) if world_after.n else 0.0
    elif cfg.objective is Objective.GREEDY:
        av = world_after.kind == W.AV
        base = float(np.mean(world_after.speed[av])) if av.any() else 0.0
    else:
        base = float(world_after.exited_last)
    return base - cfg.lambda_collision * world_after.collided_last


def _check_coverage(world: W.WorldState, joint_action: dict) -> None:
    avs = set(world.av_ids())
    keys = set(int(k) for k in joint_action)
    if keys != avs:
        raise ContractViolation(
            f"joint action covers {sorted(keys)} but AVs present are {sorted(avs)}")


def env_step(cfg: EnvConfig, world: W.WorldState, joint_action: dict,
             need_obs: bool = True) -> StepResult:
    """Apply one joint action, advance the world, and score the transition.

    ``world`` is advanced in place; the reward only needs per-step counters
    so no copy of the previous state is kept.
    """
    _check_coverage(world, joint_action)
    n = world.n
    ctrl = np.zeros(n)
    controlled = np.zeros(n, dtype=bool)
    lanes = None
    for vid, act in joint_action.items():
        a = action_accel(cfg, act)
        i = world.index_of(int(vid))
        if a is not None:
            ctrl[i] = a
            controlled[i] = True
        if act.lateral is not None:
            if not cfg.lateral:
                raise ContractViolation("lateral actions are only available on the Double Ring")
            if act.lateral not in range(world.topo.n_lanes):
                raise ContractViolation(f"lane index {act.lateral} out of range")
            lanes = lanes or {}
            lanes[int(vid)] = int(act.lateral)
    W.step(world, ctrl, controlled, lane_change=lanes, signals=lanes)
    reward = compute_reward(cfg, None, world)
    obs = {vid: observe(cfg, world, vid) for vid in world.av_ids()} if need_obs else {}
    info = {
        "outflow": world.exited_last,
        "collisions": world.collided_last,
        "mean_speed": float(np.mean(world.speed)) if world.n else 0.0,
    }
    return StepResult(obs, reward, bool(world.terminal), info)


__all__ = [
    "AgentAction", "EnvConfig", "Objective", "Observation", "StepResult", "UNCONTROLLED",
    "action_accel", "bang_value", "compute_reward", "default_objective", "env_step", "reset",
]
