"""Pure numpy twin of the compiled core in ``_core.pyx``.

Operation order matches the C code exactly; do not "simplify" expressions
here without changing the Cython source the same way.
"""
import numpy as np

GAP_SLACK = 1e-6


def _power(x, e):
    if e == np.floor(e) and 1.0 <= e <= 16.0:
        res = x.copy()
        for _ in range(1, int(e)):
            res = res * x
        return res
    return np.power(x, e)


def idm_accel(v, gap, dv, a_max, b_comf, v0, s0, tau, delta):
    inter = v * tau + v * dv / (2.0 * np.sqrt(a_max * b_comf))
    s_star = s0 + np.maximum(inter, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = s_star / gap
        out = a_max * (1.0 - _power(v / v0, delta) - r * r)
    out[gap <= 0.0] = -np.inf
    return out


def stop_distance(v, b, dt):
    bdt = b * dt
    r = v / bdt
    n = np.floor(r)
    return bdt * dt * (n * r - 0.5 * n * (n + 1.0))


def _max_safe_speed(gap, u, b, dt):
    u1 = np.maximum(u - b * dt, 0.0)
    budget = (gap - GAP_SLACK) + u1 * dt + stop_distance(u1, b, dt)
    bdt2 = b * dt * dt
    with np.errstate(invalid="ignore"):
        m = np.floor((-1.0 + np.sqrt(1.0 + 8.0 * budget / bdt2)) * 0.5)
        out = (budget + bdt2 * m * (m + 1.0) * 0.5) / ((m + 1.0) * dt)
    out[budget <= 0.0] = 0.0
    return out


def max_safe_speed(gap, u, b, dt):
    out = np.full(gap.shape, np.inf)
    finite = gap != np.inf
    out[finite] = _max_safe_speed(gap[finite], u[finite], b, dt)
    return out


def safety_clip(proposed, v, gap, u, b_comf, b_cap, dt):
    out = proposed.copy()
    finite = gap != np.inf
    a_safe = (_max_safe_speed(gap[finite], u[finite], b_comf, dt) - v[finite]) / dt
    out[finite] = np.minimum(out[finite], a_safe)
    return np.maximum(out, -b_cap)


def ring_step(pos, vel, ctrl, controlled, noise, circumference, length, a_max, b_comf,
              v0, s0, tau, delta, noise_std, b_cap, dt):
    c = circumference[:, None]
    lead_pos = np.roll(pos, -1, axis=1)
    lead_vel = np.roll(vel, -1, axis=1)
    gap = lead_pos - pos
    gap = np.where(gap <= 0.0, gap + c, gap)
    gap = gap - length
    human = idm_accel(vel.ravel(), gap.ravel(), (vel - lead_vel).ravel(), a_max, b_comf,
                      v0, s0, tau, delta).reshape(pos.shape)
    human = human + noise_std * noise
    proposed = np.where(controlled.astype(bool), ctrl, human)
    accel = safety_clip(proposed.ravel(), vel.ravel(), gap.ravel(), lead_vel.ravel(),
                        b_comf, b_cap, dt).reshape(pos.shape)
    v_new = np.maximum(vel + accel * dt, 0.0)
    vel[...] = v_new
    p = pos + v_new * dt
    pos[...] = np.where(p >= c, p - c, p)
    gap = np.roll(pos, -1, axis=1) - pos
    gap = np.where(gap <= 0.0, gap + c, gap)
    collided = ((gap - length) < 0.0).any(axis=1).astype(np.uint8)
    return accel, collided
