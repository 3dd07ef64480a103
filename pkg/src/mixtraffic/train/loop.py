"""Training loop, checkpoint bookkeeping and best-checkpoint selection."""
import csv
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .. import policy as P
from ..env.core import EnvConfig
from ..env.observe import obs_dims, obs_scale
from .collect import collect_multitask
from .stats import RunningStats
from .trpo import StepInfo, TrpoConfig, reinforce_step, trpo_step

log = logging.getLogger(__name__)

LOG_FIELDS = ("iter", "mean_objective", "mean_kl", "surrogate_improvement", "wall_time_s",
              "accepted")


@dataclass(frozen=True)
class TrainConfig:
    G: int = 200
    B: int = 40
    gamma: float = 0.999
    trpo: TrpoConfig = field(default_factory=TrpoConfig)
    algorithm: str = "trpo"  # or "reinforce"
    learning_rate: float = 1e-4  # REINFORCE only
    seed: int = 0

    def __post_init__(self):
        if not 0.9 <= self.gamma <= 0.9999:
            raise ValueError("gamma must lie in [0.9, 0.9999]")
        if self.G < 0 or self.B < 1:
            raise ValueError("G must be >= 0 and B >= 1")
        if self.algorithm not in ("trpo", "reinforce"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")


@dataclass
class IterationLog:
    iter: int
    mean_objective: float
    mean_kl: float
    surrogate_improvement: float
    wall_time_s: float
    accepted: bool = True
    failed_rollouts: int = 0

    def row(self):
        return [self.iter, f"{self.mean_objective:.10g}", f"{self.mean_kl:.10g}",
                f"{self.surrogate_improvement:.10g}", f"{self.wall_time_s:.4f}", int(self.accepted)]


@dataclass
class TrainResult:
    checkpoints: list  # PolicyParams after 0..G updates
    log: list  # IterationLog per collected batch
    scale: np.ndarray
    paths: list = field(default_factory=list)

    @property
    def best_index(self) -> int:
        return select_best_checkpoint([r.mean_objective for r in self.log])

    @property
    def best(self) -> P.PolicyParams:
        return self.checkpoints[self.best_index]


def select_best_checkpoint(objectives) -> int:
    """Index of the highest mean objective; ties go to the earliest."""
    vals = [float(getattr(v, "mean_objective", v)) for v in objectives]
    if not vals:
        raise ValueError("empty training log")
    best = 0
    for k, v in enumerate(vals):
        if v > vals[best]:
            best = k
    return best


def read_log(path) -> list:
    """Parse a training-log CSV back into :class:`IterationLog` rows."""
    with open(path, newline="") as f:
        return [IterationLog(int(r["iter"]), float(r["mean_objective"]), float(r["mean_kl"]),
                             float(r["surrogate_improvement"]), float(r["wall_time_s"]),
                             bool(int(r["accepted"])))
                for r in csv.DictReader(f)]


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow(r.row())


def train(env_cfgs, tcfg: TrainConfig = TrainConfig(), out_dir=None, on_iteration=None,
          fast: bool = True) -> TrainResult:
    """Multi-task training over ``env_cfgs`` (one per density configuration)."""
    env_cfgs = list(env_cfgs)
    if not env_cfgs:
        raise ValueError("at least one environment configuration required")
    base: EnvConfig = env_cfgs[0]
    if any(c.system is not base.system for c in env_cfgs):
        raise ValueError("all configurations must share one system")
    n_val, n_pres = obs_dims(base.system, base.chains_per_lane)
    spec = P.policy_spec_for(base.system, n_val, n_pres)
    scale = obs_scale(base.system, base.chains_per_lane)
    params = P.init_params(spec, np.random.default_rng(np.random.SeedSequence([tcfg.seed, 7919])),
                           base.c_accel)
    stats = RunningStats(tcfg.gamma)
    result = TrainResult([params], [], scale)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.paths.append(_save(out_dir, 0, params, scale, base))
    for it in range(tcfg.G):
        t0 = time.perf_counter()
        batch = collect_multitask(params, env_cfgs, tcfg.B, tcfg.seed, it, stats, tcfg.gamma,
                                  scale, fast=fast)
        if len(batch) == 0:
            info = StepInfo(False, 0.0, 0.0, 0, "no agent transitions")
        elif tcfg.algorithm == "trpo":
            params, info = trpo_step(batch, params, tcfg.trpo)
        else:
            params, info = reinforce_step(batch, params, tcfg.learning_rate)
        entry = IterationLog(it, batch.mean_objective, info.mean_kl, info.surrogate_improvement,
                             time.perf_counter() - t0, info.accepted, batch.failed)
        result.log.append(entry)
        result.checkpoints.append(params)
        log.info("iter %d objective %.4f kl %.5f gain %.4g %s", it, entry.mean_objective,
                 entry.mean_kl, entry.surrogate_improvement, info.reason)
        if out_dir is not None:
            result.paths.append(_save(out_dir, it + 1, params, scale, base))
            write_log(os.path.join(out_dir, "train_log.csv"), result.log)
        if on_iteration is not None:
            on_iteration(entry, info, batch, params)
    return result


def _save(out_dir, k, params, scale, cfg) -> str:
    path = os.path.join(out_dir, f"ckpt_{k:04d}.npz")
    P.save_checkpoint(path, params, scale, {"system": cfg.system.value, "updates": k})
    return path
