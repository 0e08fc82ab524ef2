"""Rotating-frame construction from ephemeris body states.

The synodic frame is built from the instantaneous Earth->Moon position
and velocity: x along the Earth-Moon line, z along the orbit normal,
y completing the triad.  The direction cosine matrix M maps rotating
components to inertial components.  M and Mdot are analytic in the
provider's position/velocity/acceleration; Mddot is obtained by central
differencing Mdot (the neglected terms are far below every tolerance in
this package because the frame evolves on the monthly timescale).
"""

from __future__ import annotations

import numpy as np

from .ephemeris import body_state

_MDDOT_HALF_STEP_S = 8.0


def _unit_and_rate(vec: np.ndarray, vec_dot: np.ndarray):
    n = np.linalg.norm(vec)
    u = vec / n
    udot = vec_dot / n - vec * (vec @ vec_dot) / n**3
    return u, udot


def frame_matrices(provider, epoch_s: float):
    """Rotation M (rotating->inertial) and its first derivative at epoch."""
    earth = body_state(provider, "earth", epoch_s)
    moon = body_state(provider, "moon", epoch_s)
    r = moon.r_km - earth.r_km
    v = moon.v_kms - earth.v_kms
    a = moon.a_kms2 - earth.a_kms2

    xhat, xdot = _unit_and_rate(r, v)
    h = np.cross(r, v)
    hdot = np.cross(r, a)
    zhat, zdot = _unit_and_rate(h, hdot)
    yhat = np.cross(zhat, xhat)
    ydot = np.cross(zdot, xhat) + np.cross(zhat, xdot)

    m = np.column_stack([xhat, yhat, zhat])
    mdot = np.column_stack([xdot, ydot, zdot])
    return m, mdot


def frame_with_accel(provider, epoch_s: float):
    """(M, Mdot, Mddot) with Mddot from a central difference of Mdot."""
    m, mdot = frame_matrices(provider, epoch_s)
    _, mdot_p = frame_matrices(provider, epoch_s + _MDDOT_HALF_STEP_S)
    _, mdot_m = frame_matrices(provider, epoch_s - _MDDOT_HALF_STEP_S)
    mddot = (mdot_p - mdot_m) / (2.0 * _MDDOT_HALF_STEP_S)
    return m, mdot, mddot


def body_in_rotating_frame(provider, body: str, epoch_s: float, origin: str,
                           system):
    """Normalized rotating-frame position and velocity of a body.

    ``origin`` is "moon" (ephemeris-driven frame) or "barycenter".
    """
    rec = body_state(provider, body, epoch_s)
    m, mdot = frame_matrices(provider, epoch_s)
    if origin == "moon":
        org = body_state(provider, "moon", epoch_s)
        dr = rec.r_km - org.r_km
        dv = rec.v_kms - org.v_kms
    elif origin == "barycenter":
        dr = rec.r_km
        dv = rec.v_kms
    else:
        raise ValueError(f"unknown origin {origin!r}")
    r_rot = m.T @ dr / system.lu_km
    v_rot = (mdot.T @ dr + m.T @ dv) / system.lu_km * system.tu_s
    return r_rot, v_rot


def synodic_to_vnb(ref_state: np.ndarray, moon_pos: np.ndarray) -> np.ndarray:
    """Rotation whose columns map VNB components into the synodic frame.

    x along the reference velocity, y along velocity x (position relative
    to the Moon), z completing the right-handed triad.
    """
    ref_state = np.asarray(ref_state, dtype=float)
    v = ref_state[3:6]
    rel = ref_state[0:3] - np.asarray(moon_pos, dtype=float)
    vn = np.linalg.norm(v)
    if vn < 1e-12:
        raise ValueError("degenerate geometry: zero velocity")
    cross = np.cross(v, rel)
    cn = np.linalg.norm(cross)
    if cn < 1e-12:
        raise ValueError("degenerate geometry: velocity parallel to lunar radial")
    xhat = v / vn
    yhat = cross / cn
    zhat = np.cross(xhat, yhat)
    return np.column_stack([xhat, yhat, zhat])
