"""Backend selection for the numeric hot loops.

The compiled Cython core is used when it was built; otherwise (or when
``MIXTRAFFIC_PURE_PYTHON=1`` is set) the numpy twin is used.  Both expose the
same functions and produce identical results.
"""
import os

import numpy as np

from . import _core_py

if os.environ.get("MIXTRAFFIC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _core_py
    BACKEND = "python"
else:
    try:
        from . import _core as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _core_py
        BACKEND = "python"


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def idm_accel(v, gap, dv, a_max, b_comf, v0, s0, tau, delta, impl=None):
    impl = impl or _impl
    return impl.idm_accel(_f64(v), _f64(gap), _f64(dv), a_max, b_comf, v0, s0, tau, delta)


def max_safe_speed(gap, u, b, dt, impl=None):
    impl = impl or _impl
    return impl.max_safe_speed(_f64(gap), _f64(u), b, dt)


def stop_distance(v, b, dt, impl=None):
    impl = impl or _impl
    return impl.stop_distance(_f64(v), b, dt)


def safety_clip(proposed, v, gap, u, b_comf, b_cap, dt, impl=None):
    impl = impl or _impl
    return impl.safety_clip(_f64(proposed), _f64(v), _f64(gap), _f64(u), b_comf, b_cap, dt)


def ring_step(pos, vel, ctrl, controlled, noise, circumference, length, idm, b_cap, dt,
              impl=None):
    """Fused step for a (B, N) batch of single-lane rings; mutates ``pos``/``vel``."""
    impl = impl or _impl
    return impl.ring_step(
        pos, vel, _f64(ctrl), np.ascontiguousarray(controlled, dtype=np.uint8), _f64(noise),
        _f64(circumference), float(length), idm.a_max, idm.b_comf, idm.v0, idm.s0, idm.tau,
        idm.delta_exp, idm.noise_std, b_cap, dt,
    )
