"""Lock-step batch of Single Ring worlds backed by the fused ring kernel.

Each member ring reproduces ``WorldState`` on the same seed exactly: same
initial placement, same noise stream, same operation order.  The AV is
vehicle 0.
"""
import numpy as np

from .. import kernels
from ..sim.network import build_network
from ..sim.params import B_CAP, VEHICLE_LENGTH, IdmParams
from ..sim.world import NoiseStream, initial_placement

PREFETCH_STEPS = 256


class RingBatch:
    def __init__(self, circumferences, seeds, idm: IdmParams | None = None,
                 b_cap: float = B_CAP, dt: float = 0.1):
        if len(circumferences) != len(seeds):
            raise ValueError("one seed per ring required")
        self.idm = idm or IdmParams()
        self.b_cap = b_cap
        self.dt = dt
        self.c = np.asarray(circumferences, dtype=np.float64)
        rows = []
        self._streams = []
        for c, seed in zip(self.c, seeds):
            noise_ss, _, place_ss = np.random.SeedSequence(int(seed)).spawn(3)
            spec = build_network("single_ring", float(c))
            rows.append([p for _, p, _ in initial_placement(spec, place_ss, self.idm.s0)])
            self._streams.append(NoiseStream(noise_ss))
        self.pos = np.ascontiguousarray(rows, dtype=np.float64)
        self.vel = np.zeros_like(self.pos)
        self.batch, self.n = self.pos.shape
        self._noise = np.empty((self.batch, 0, self.n))
        self._k = 0
        self.collided = np.zeros(self.batch, dtype=bool)
        self.steps = 0

    def _next_noise(self) -> np.ndarray:
        if self._k == self._noise.shape[1]:
            self._noise = np.stack(
                [s.take(PREFETCH_STEPS * self.n).reshape(PREFETCH_STEPS, self.n)
                 for s in self._streams])
            self._k = 0
        out = np.ascontiguousarray(self._noise[:, self._k, :])
        self._k += 1
        return out

    def step(self, av_accel=None) -> np.ndarray:
        """Advance every ring; ``av_accel`` (B,) commands the AV, NaN or None
        leaves it uncontrolled.  Returns applied accelerations (B, N)."""
        ctrl = np.zeros((self.batch, self.n))
        controlled = np.zeros((self.batch, self.n), dtype=np.uint8)
        if av_accel is not None:
            av_accel = np.asarray(av_accel, dtype=np.float64)
            on = ~np.isnan(av_accel)
            ctrl[on, 0] = av_accel[on]
            controlled[:, 0] = on
        accel, coll = kernels.ring_step(self.pos, self.vel, ctrl, controlled, self._next_noise(),
                                        self.c, VEHICLE_LENGTH, self.idm, self.b_cap, self.dt)
        self.collided |= coll.astype(bool)
        self.steps += 1
        return accel

    def observe(self) -> np.ndarray:
        """(B, 3) raw observations: AV speed, bumper gap to leader, leader speed."""
        gap = self.pos[:, 1] - self.pos[:, 0]
        gap = np.where(gap <= 0.0, gap + self.c, gap) - VEHICLE_LENGTH
        return np.stack([self.vel[:, 0], gap, self.vel[:, 1]], axis=1)

    def mean_speed(self) -> np.ndarray:
        return self.vel.mean(axis=1)

    def warmup(self, steps: int) -> None:
        for _ in range(steps):
            self.step()
