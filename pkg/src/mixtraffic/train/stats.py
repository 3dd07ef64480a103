"""Reward centering/normalization and discounted returns."""
from dataclasses import dataclass, field

import numpy as np

EPS = 1e-8


@dataclass
class RunningStats:
    """Running reward mean and running std of the discounted reward sum R_hat.

    ``R_hat`` holds one accumulator per parallel stream (environment); the
    mean and the Welford accumulators for R_hat are shared.  Rewards are
    normalised with the post-update statistics.
    """

    gamma: float
    n_streams: int = 1
    count: int = 0
    mu_r: float = 0.0
    r_hat: np.ndarray = field(default=None)
    _m: float = 0.0  # running mean of R_hat
    _m2: float = 0.0  # sum of squared deviations of R_hat

    def __post_init__(self):
        if self.r_hat is None:
            self.r_hat = np.zeros(self.n_streams)

    @property
    def sigma_r(self) -> float:
        return float(np.sqrt(self._m2 / self.count)) if self.count else 0.0

    def reset_streams(self) -> None:
        """Zero the discounted sums at an episode boundary."""
        self.r_hat[:] = 0.0

    def update(self, r: float, stream: int = 0) -> float:
        """Fold one reward in and return it normalised."""
        r = float(r)
        if not np.isfinite(r):
            raise ValueError("reward must be finite")
        self.count += 1
        self.mu_r += (r - self.mu_r) / self.count
        R = self.gamma * self.r_hat[stream] + r
        self.r_hat[stream] = R
        d = R - self._m
        self._m += d / self.count
        self._m2 += d * (R - self._m)
        return (r - self.mu_r) / max(self.sigma_r, EPS)

    def update_many(self, rewards, streams) -> np.ndarray:
        """Sequential :meth:`update` over (reward, stream) pairs in the given order."""
        return np.array([self.update(r, s) for r, s in zip(rewards, streams)])

    def copy(self) -> "RunningStats":
        return RunningStats(self.gamma, self.n_streams, self.count, self.mu_r,
                            self.r_hat.copy(), self._m, self._m2)


def returns_to_go(rewards, gamma: float) -> np.ndarray:
    """out[t] = r[t] + gamma * out[t+1]."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(r.size - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out
