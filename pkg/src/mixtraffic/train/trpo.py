"""Policy-gradient updates: REINFORCE gradient, surrogate, KL, TRPO step."""
import math
from dataclasses import dataclass

import numpy as np

from .. import policy as P
from ..sim.params import ContractViolation


@dataclass
class TrajectoryBatch:
    """Flat transitions ordered by (environment, agent id, time).

    ``weights`` are reward-to-go values of the normalised rewards.
    ``objectives`` holds one raw episode objective per successful environment.
    """

    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    weights: np.ndarray
    env: np.ndarray
    agent: np.ndarray
    time: np.ndarray
    objectives: np.ndarray
    env_configs: list
    failed: int = 0

    def __len__(self):
        return self.obs.shape[0]

    @property
    def mean_objective(self) -> float:
        return float(np.mean(self.objectives)) if self.objectives.size else float("nan")

    def subset(self, mask) -> "TrajectoryBatch":
        m = mask if isinstance(mask, slice) else np.asarray(mask)
        return TrajectoryBatch(self.obs[m], self.actions[m], self.logp[m], self.weights[m],
                               self.env[m], self.agent[m], self.time[m], self.objectives,
                               self.env_configs, self.failed)


@dataclass(frozen=True)
class TrpoConfig:
    delta_kl: float = 0.01
    cg_iters: int = 10
    cg_damping: float = 0.1
    cg_tol: float = 1e-10
    backtrack_ratio: float = 0.8
    max_backtracks: int = 15
    fvp_subsample: int = 1  # use every k-th transition for curvature products

    def __post_init__(self):
        if not self.delta_kl > 0:
            raise ValueError("delta_kl must be > 0")
        if self.fvp_subsample < 1:
            raise ValueError("fvp_subsample must be >= 1")


@dataclass
class StepInfo:
    accepted: bool
    mean_kl: float
    surrogate_improvement: float
    backtracks: int
    reason: str = ""


def reinforce_gradient(batch: TrajectoryBatch, params: P.PolicyParams) -> np.ndarray:
    """Gradient of sum_t log pi(a_t|o_t) * G_t over the whole batch."""
    return P.grad_log_prob(params, batch.obs, batch.actions, batch.weights)


def surrogate_loss(batch: TrajectoryBatch, params_new: P.PolicyParams,
                   params_old: P.PolicyParams | None = None, logp_old=None) -> float:
    """sum_t exp(logp_new - logp_old) * G_t.

    ``logp_old`` defaults to the log-probabilities under ``params_old``, or to
    the ones recorded in the batch when ``params_old`` is None.
    """
    if logp_old is None:
        logp_old = batch.logp if params_old is None else P.log_prob(
            P.forward(params_old, batch.obs), batch.actions)
    logp_new = P.log_prob(P.forward(params_new, batch.obs), batch.actions)
    return float(np.sum(np.exp(logp_new - logp_old) * batch.weights))


def mean_kl(batch: TrajectoryBatch, params_new: P.PolicyParams, params_old: P.PolicyParams,
            dist_old: P.Distribution | None = None) -> float:
    """Average of KL(pi_old(.|o) || pi_new(.|o)) over the batch observations."""
    dist_old = dist_old or P.forward(params_old, batch.obs)
    return float(np.mean(P.kl(dist_old, P.forward(params_new, batch.obs))))


def fisher_vector_product(batch: TrajectoryBatch, params: P.PolicyParams, v,
                          damping: float = 0.1) -> np.ndarray:
    return P.fisher_vector_product(params, batch.obs, v, damping)


def conjugate_gradient(apply_a, g, iters: int = 10, tol: float = 1e-10):
    """Solve A x = g.  Returns None when a non-finite value appears."""
    g = np.asarray(g, dtype=np.float64)
    x = np.zeros_like(g)
    r = g.copy()
    p = r.copy()
    rr = float(r @ r)
    for _ in range(iters):
        if rr <= tol:
            break
        ap = apply_a(p)
        pap = float(p @ ap)
        if not np.isfinite(pap) or pap <= 0:
            return None if not np.isfinite(pap) else x
        alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        rr_new = float(r @ r)
        if not np.isfinite(rr_new):
            return None
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def trpo_step(batch: TrajectoryBatch, params: P.PolicyParams, cfg: TrpoConfig = TrpoConfig()):
    """One constrained update.  Returns (new params, StepInfo)."""
    spec = params.spec
    theta = P.flatten(params)
    g = reinforce_gradient(batch, params)
    if not np.any(g) or not np.all(np.isfinite(g)):
        return params, StepInfo(False, 0.0, 0.0, 0, "zero or non-finite gradient")
    sub = batch if cfg.fvp_subsample == 1 else batch.subset(slice(None, None, cfg.fvp_subsample))
    dist_sub = P.forward(params, sub.obs)

    def fvp(v):
        return P.fisher_vector_product(params, sub.obs, v, cfg.cg_damping, dist=dist_sub)

    x = conjugate_gradient(fvp, g, cfg.cg_iters, cfg.cg_tol)
    if x is None:
        return params, StepInfo(False, 0.0, 0.0, 0, "non-finite conjugate gradient")
    shs = float(x @ fvp(x))
    if not np.isfinite(shs) or shs <= 0:
        return params, StepInfo(False, 0.0, 0.0, 0, "degenerate curvature")
    full = math.sqrt(2.0 * cfg.delta_kl / shs) * x
    dist_old = P.forward(params, batch.obs)
    logp_old = P.log_prob(dist_old, batch.actions)
    surr_old = surrogate_loss(batch, params, logp_old=logp_old)
    frac = 1.0
    for k in range(cfg.max_backtracks):
        cand = P.unflatten(spec, theta + frac * full)
        kl_k = mean_kl(batch, cand, params, dist_old)
        surr = surrogate_loss(batch, cand, logp_old=logp_old)
        if np.isfinite(kl_k) and np.isfinite(surr) and kl_k <= cfg.delta_kl and surr > surr_old:
            return cand, StepInfo(True, kl_k, surr - surr_old, k)
        frac *= cfg.backtrack_ratio
    return params, StepInfo(False, 0.0, 0.0, cfg.max_backtracks, "line search exhausted")


def reinforce_step(batch: TrajectoryBatch, params: P.PolicyParams, lr: float):
    """Plain gradient ascent with learning rate ``lr`` (fallback for large systems)."""
    g = reinforce_gradient(batch, params)
    new = P.unflatten(params.spec, P.flatten(params) + lr * g)
    kl_v = mean_kl(batch, new, params)
    gain = surrogate_loss(batch, new, params) - surrogate_loss(batch, params, params)
    return new, StepInfo(True, kl_v, gain, 0)


def check_batch(batch: TrajectoryBatch, params: P.PolicyParams) -> None:
    if batch.obs.shape[1] != params.spec.in_dim:
        raise ContractViolation("batch observation width does not match the policy")
