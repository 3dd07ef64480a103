# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: IDM, braking-feasibility clip and the fused ring step.

Every function mirrors ``mixtraffic._core_py`` operation for operation so
that both backends produce identical floating point results.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport floor, pow, sqrt, INFINITY

cnp.import_array()

# Distance held back by the safety clip so rounding cannot produce a
# negative gap when the braking budget is used up exactly.
cdef double GAP_SLACK = 1e-6


cdef inline double _power(double x, double e) noexcept nogil:
    cdef int n, k
    cdef double res
    if e == floor(e) and e >= 1.0 and e <= 16.0:
        n = <int>e
        res = x
        for k in range(1, n):
            res = res * x
        return res
    return pow(x, e)


cdef inline double _idm(double v, double gap, double dv, double a_max, double b_comf,
                        double v0, double s0, double tau, double delta) noexcept nogil:
    cdef double inter, s_star, r
    if gap <= 0.0:
        return -INFINITY
    inter = v * tau + v * dv / (2.0 * sqrt(a_max * b_comf))
    if inter < 0.0:
        inter = 0.0
    s_star = s0 + inter
    r = s_star / gap
    return a_max * (1.0 - _power(v / v0, delta) - r * r)


cdef inline double _stop_dist(double v, double b, double dt) noexcept nogil:
    cdef double bdt = b * dt
    cdef double r = v / bdt
    cdef double n = floor(r)
    return bdt * dt * (n * r - 0.5 * n * (n + 1.0))


cdef inline double _max_safe_speed(double gap, double u, double b, double dt) noexcept nogil:
    cdef double u1, budget, bdt2, m
    u1 = u - b * dt
    if u1 < 0.0:
        u1 = 0.0
    budget = (gap - GAP_SLACK) + u1 * dt + _stop_dist(u1, b, dt)
    if budget <= 0.0:
        return 0.0
    bdt2 = b * dt * dt
    m = floor((-1.0 + sqrt(1.0 + 8.0 * budget / bdt2)) * 0.5)
    return (budget + bdt2 * m * (m + 1.0) * 0.5) / ((m + 1.0) * dt)


cdef inline double _clip(double proposed, double v, double gap, double u,
                         double b_comf, double b_cap, double dt) noexcept nogil:
    cdef double out = proposed
    cdef double a_safe
    if gap != INFINITY:
        a_safe = (_max_safe_speed(gap, u, b_comf, dt) - v) / dt
        if a_safe < out:
            out = a_safe
    if out < -b_cap:
        out = -b_cap
    return out


def idm_accel(double[::1] v, double[::1] gap, double[::1] dv, double a_max, double b_comf,
              double v0, double s0, double tau, double delta):
    cdef Py_ssize_t i, n = v.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = _idm(v[i], gap[i], dv[i], a_max, b_comf, v0, s0, tau, delta)
    return out


def max_safe_speed(double[::1] gap, double[::1] u, double b, double dt):
    cdef Py_ssize_t i, n = gap.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        if gap[i] == INFINITY:
            o[i] = INFINITY
        else:
            o[i] = _max_safe_speed(gap[i], u[i], b, dt)
    return out


def stop_distance(double[::1] v, double b, double dt):
    cdef Py_ssize_t i, n = v.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = _stop_dist(v[i], b, dt)
    return out


def safety_clip(double[::1] proposed, double[::1] v, double[::1] gap, double[::1] u,
                double b_comf, double b_cap, double dt):
    cdef Py_ssize_t i, n = v.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = _clip(proposed[i], v[i], gap[i], u[i], b_comf, b_cap, dt)
    return out


def ring_step(double[:, ::1] pos, double[:, ::1] vel, double[:, ::1] ctrl,
              cnp.uint8_t[:, ::1] controlled, double[:, ::1] noise, double[::1] circumference,
              double length, double a_max, double b_comf, double v0, double s0, double tau,
              double delta, double noise_std, double b_cap, double dt):
    """Advance B independent single-lane rings by one step, in place.

    Vehicle ``i + 1`` (cyclically) leads vehicle ``i``.  Returns the applied
    accelerations and a per-ring flag set when any gap became negative.
    """
    cdef Py_ssize_t b, i, lead, nb = pos.shape[0], nv = pos.shape[1]
    cdef double gap, a, c, v_new, p
    accel_arr = np.empty((nb, nv), dtype=np.float64)
    collided_arr = np.zeros(nb, dtype=np.uint8)
    cdef double[:, ::1] acc = accel_arr
    cdef cnp.uint8_t[::1] collided = collided_arr
    with nogil:
        for b in range(nb):
            c = circumference[b]
            for i in range(nv):
                lead = i + 1
                if lead == nv:
                    lead = 0
                gap = pos[b, lead] - pos[b, i]
                if gap <= 0.0:
                    gap = gap + c
                gap = gap - length
                if controlled[b, i]:
                    a = ctrl[b, i]
                else:
                    a = _idm(vel[b, i], gap, vel[b, i] - vel[b, lead], a_max, b_comf,
                             v0, s0, tau, delta)
                    a = a + noise_std * noise[b, i]
                acc[b, i] = _clip(a, vel[b, i], gap, vel[b, lead], b_comf, b_cap, dt)
            for i in range(nv):
                v_new = vel[b, i] + acc[b, i] * dt
                if v_new < 0.0:
                    v_new = 0.0
                vel[b, i] = v_new
                p = pos[b, i] + v_new * dt
                if p >= c:
                    p = p - c
                pos[b, i] = p
            for i in range(nv):
                lead = i + 1
                if lead == nv:
                    lead = 0
                gap = pos[b, lead] - pos[b, i]
                if gap <= 0.0:
                    gap = gap + c
                if gap - length < 0.0:
                    collided[b] = 1
    return accel_arr, collided_arr
