"""Equations of motion: circular restricted model and the ephemeris-driven
high-fidelity model, their Jacobians, and joint state/STM propagation.

Both models share one convention: states are 6-vectors (position,
velocity) in normalized rotating-frame coordinates.  The restricted model
uses the barycentric frame; the high-fidelity model uses a Moon-centered
frame built from instantaneous ephemeris geometry.  ``shift_origin``
converts between the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .constants import DEFAULT_SYSTEM, EarthMoonSystem
from .frames import frame_with_accel, synodic_to_vnb  # noqa: F401 (re-export)
from .ephemeris import body_state
from .numerics import IntegratorSpec, Trajectory, integrate

_COLLISION_RADIUS = 1e-8


class DynamicsError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynodicState:
    """Position/velocity in a normalized rotating frame, with epoch."""

    r: np.ndarray
    v: np.ndarray
    t: float = 0.0

    @classmethod
    def from_vector(cls, y, t=0.0):
        y = np.asarray(y, dtype=float)
        return cls(r=y[0:3].copy(), v=y[3:6].copy(), t=float(t))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.v])


@dataclass(frozen=True)
class Cr3bpParams:
    mu: float

    def __post_init__(self):
        if not 0.0 < self.mu < 0.5:
            raise ValueError("mass ratio must satisfy 0 < mu < 0.5")


def _primary_distances(x, y, z, mu):
    r1 = math.sqrt((x + mu) ** 2 + y * y + z * z)
    r2 = math.sqrt((x - 1.0 + mu) ** 2 + y * y + z * z)
    if r1 < _COLLISION_RADIUS or r2 < _COLLISION_RADIUS:
        raise DynamicsError("collision with a primary body")
    return r1, r2


def cr3bp_derivative(t, state, p: Cr3bpParams) -> np.ndarray:
    """Rotating-frame equation of motion of the circular restricted model."""
    x, y, z, vx, vy, vz = state[:6]
    mu = p.mu
    r1, r2 = _primary_distances(x, y, z, mu)
    r13, r23 = r1**3, r2**3
    ax = 2.0 * vy + x - (1.0 - mu) * (x + mu) / r13 - mu * (x - 1.0 + mu) / r23
    ay = -2.0 * vx + y - (1.0 - mu) * y / r13 - mu * y / r23
    az = -(1.0 - mu) * z / r13 - mu * z / r23
    return np.array([vx, vy, vz, ax, ay, az])


def pseudo_potential(state, p: Cr3bpParams) -> float:
    x, y, z = state[0:3]
    r1, r2 = _primary_distances(x, y, z, p.mu)
    return (1.0 - p.mu) / r1 + p.mu / r2 + 0.5 * (x * x + y * y)


def jacobi_constant(state, p: Cr3bpParams) -> float:
    """C = 2*Omega - v^2, conserved along the restricted-model flow."""
    v2 = float(state[3] ** 2 + state[4] ** 2 + state[5] ** 2)
    return 2.0 * pseudo_potential(state, p) - v2


def _gravity_hessian(d: np.ndarray, gm: float) -> np.ndarray:
    """Hessian contribution of a point mass: gm * (3 d d^T / |d|^5 - I/|d|^3)."""
    dn = np.linalg.norm(d)
    return gm * (3.0 * np.outer(d, d) / dn**5 - np.eye(3) / dn**3)


_CORIOLIS = np.array([[0.0, 2.0, 0.0], [-2.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


def cr3bp_jacobian(t, state, p: Cr3bpParams) -> np.ndarray:
    """State-space Jacobian [[0, I], [U, Coriolis]] of the restricted model."""
    r = np.asarray(state[0:3], dtype=float)
    mu = p.mu
    _primary_distances(r[0], r[1], r[2], mu)
    u = np.diag([1.0, 1.0, 0.0]).astype(float)
    u += _gravity_hessian(r - np.array([-mu, 0.0, 0.0]), 1.0 - mu)
    u += _gravity_hessian(r - np.array([1.0 - mu, 0.0, 0.0]), mu)
    a = np.zeros((6, 6))
    a[0:3, 3:6] = np.eye(3)
    a[3:6, 0:3] = u
    a[3:6, 3:6] = _CORIOLIS
    return a


def collinear_equilibrium(p: Cr3bpParams, index: int = 2) -> float:
    """x-coordinate of the collinear equilibrium L1, L2 or L3."""
    mu = p.mu

    def fx(x):
        return (x - (1.0 - mu) * (x + mu) / abs(x + mu) ** 3
                - mu * (x - 1.0 + mu) / abs(x - 1.0 + mu) ** 3)

    brackets = {1: (mu + 1e-6, 1.0 - mu - 1e-6), 2: (1.0 - mu + 1e-6, 2.0),
                3: (-2.0, -mu - 1e-6)}
    if index not in brackets:
        raise ValueError("index must be 1, 2 or 3")
    return float(brentq(fx, *brackets[index], xtol=1e-14, rtol=1e-15))


def shift_origin(state, system: EarthMoonSystem = DEFAULT_SYSTEM,
                 to: str = "moon") -> np.ndarray:
    """Shift a rotating-frame state between barycentric and Moon origins."""
    state = np.asarray(state, dtype=float).copy()
    offset = np.array([1.0 - system.mu, 0.0, 0.0])
    if to == "moon":
        state[0:3] -= offset
    elif to == "barycenter":
        state[0:3] += offset
    else:
        raise ValueError("to must be 'moon' or 'barycenter'")
    return state


class Cr3bpModel:
    """Restricted-model dynamics bundled with its parameters."""

    name = "cr3bp"
    frame_origin = "barycenter"

    def __init__(self, params: Cr3bpParams | None = None,
                 system: EarthMoonSystem = DEFAULT_SYSTEM):
        self.system = system
        self.params = params or Cr3bpParams(mu=system.mu)

    def derivative(self, t, state):
        return cr3bp_derivative(t, state, self.params)

    def jacobian(self, t, state):
        return cr3bp_jacobian(t, state, self.params)

    def moon_position(self, t):
        return np.array([1.0 - self.params.mu, 0.0, 0.0])


@dataclass(frozen=True)
class BodySpec:
    """A gravitating body: full term for primaries, differential for others."""

    name: str
    gm_km3_s2: float
    differential: bool = False


@dataclass(frozen=True)
class HfemParams:
    """Configuration of the ephemeris-driven model.

    ``srp_accel_mm_s2`` is the characteristic solar radiation acceleration
    at reflectivity 1; the per-agent reflectivity scales it.  Frame
    normalization constants ride along so a params object fully determines
    the unit system.
    """

    bodies: tuple = (
        BodySpec("earth", DEFAULT_SYSTEM.gm_earth),
        BodySpec("moon", DEFAULT_SYSTEM.gm_moon),
        BodySpec("sun", DEFAULT_SYSTEM.gm_sun, differential=True),
    )
    srp: bool = False
    srp_accel_mm_s2: float = 0.0
    reflectivity: float = 1.0
    lu_km: float = DEFAULT_SYSTEM.lu_km
    tu_s: float = DEFAULT_SYSTEM.tu_s

    def __post_init__(self):
        if self.lu_km <= 0 or self.tu_s <= 0:
            raise ValueError("normalization constants must be positive")
        for b in self.bodies:
            if b.gm_km3_s2 <= 0:
                raise ValueError(f"gm of {b.name!r} must be positive")
        names = [b.name for b in self.bodies]
        if "moon" not in names:
            raise ValueError("the Moon must be among the configured bodies")
        if self.srp and self.srp_accel_mm_s2 > 0 and "sun" not in names:
            raise ValueError("solar radiation pressure needs the sun in the body list")


class HfemModel:
    """Moon-centered rotating-frame dynamics driven by an ephemeris provider.

    Set ``cache_span`` to precompute frame matrices and body positions on a
    fine uniform grid; the right-hand side then runs off local cubic
    interpolation, which is what makes long Monte Carlo campaigns viable.
    Direct (uncached) evaluation is exact and remains the default.
    """

    name = "hfem"
    frame_origin = "moon"

    def __init__(self, params: HfemParams, provider,
                 system: EarthMoonSystem = DEFAULT_SYSTEM,
                 cache_span=None, cache_step_s: float = 300.0):
        self.params = params
        self.provider = provider
        self.system = system
        self._cache = None
        if cache_span is not None:
            self.build_cache(*cache_span, step_s=cache_step_s)

    def with_reflectivity(self, reflectivity: float) -> "HfemModel":
        """Clone with a different reflectivity, sharing the environment cache."""
        from dataclasses import replace
        clone = HfemModel(replace(self.params, reflectivity=reflectivity),
                          self.provider, self.system)
        clone._cache = self._cache
        return clone

    # -- environment evaluation ------------------------------------------------

    def _env_direct(self, t_norm: float):
        """Frame matrices, Moon state and body positions at one epoch."""
        p = self.params
        t_s = t_norm * p.tu_s
        m, mdot, mddot = frame_with_accel(self.provider, t_s)
        moon = body_state(self.provider, "moon", t_s)
        b_pos = moon.r_km / p.lu_km
        b_acc = moon.a_kms2 / p.lu_km * p.tu_s**2
        body_pos = np.empty((len(p.bodies), 3))
        for i, b in enumerate(p.bodies):
            body_pos[i] = body_state(self.provider, b.name, t_s).r_km / p.lu_km
        sun_pos = None
        if p.srp and p.srp_accel_mm_s2 > 0.0:
            sun_pos = body_state(self.provider, "sun", t_s).r_km / p.lu_km
        return (m, mdot * p.tu_s, mddot * p.tu_s**2, b_pos, b_acc, body_pos, sun_pos)

    def _pack_direct(self, t_norm: float) -> np.ndarray:
        m, mdot, mddot, b_pos, b_acc, body_pos, sun_pos = self._env_direct(t_norm)
        parts = [m.ravel(), mdot.ravel(), mddot.ravel(), b_pos, b_acc,
                 body_pos.ravel()]
        if sun_pos is not None:
            parts.append(sun_pos)
        return np.concatenate(parts)

    def build_cache(self, t0_norm: float, t1_norm: float, step_s: float = 300.0):
        """Precompute the packed environment vector on a uniform grid."""
        p = self.params
        pad = 2.0 * step_s / p.tu_s
        lo, hi = min(t0_norm, t1_norm) - pad, max(t0_norm, t1_norm) + pad
        h = step_s / p.tu_s
        n = int(math.ceil((hi - lo) / h)) + 1
        ts = lo + h * np.arange(n)
        vals = np.empty((n, self._pack_direct(lo).size))
        for i, t in enumerate(ts):
            vals[i] = self._pack_direct(t)
        # Hermite-style cubic segments with central-difference tangents.
        tang = np.empty_like(vals)
        tang[1:-1] = (vals[2:] - vals[:-2]) / 2.0
        tang[0] = vals[1] - vals[0]
        tang[-1] = vals[-1] - vals[-2]
        f0, f1 = vals[:-1], vals[1:]
        m0, m1 = tang[:-1], tang[1:]
        coeff = np.empty((n - 1, 4, vals.shape[1]))
        coeff[:, 0] = f0
        coeff[:, 1] = m0
        coeff[:, 2] = -3 * f0 + 3 * f1 - 2 * m0 - m1
        coeff[:, 3] = 2 * f0 - 2 * f1 + m0 + m1
        self._cache = {"t0": lo, "h": h, "n": n, "coeff": coeff}

    def _pack(self, t_norm: float) -> np.ndarray:
        c = self._cache
        if c is None:
            return self._pack_direct(t_norm)
        s = (t_norm - c["t0"]) / c["h"]
        k = int(s)
        if k < 0 or k >= c["n"] - 1:
            if -1e-9 <= s <= c["n"] - 1 + 1e-9:
                k = min(max(k, 0), c["n"] - 2)
            else:
                return self._pack_direct(t_norm)
        u = s - k
        ck = c["coeff"][k]
        return ((ck[3] * u + ck[2]) * u + ck[1]) * u + ck[0]

    # -- dynamics ---------------------------------------------------------------

    def _eval(self, t, state, need_jacobian: bool):
        p = self.params
        f = self._pack(float(t))
        m = f[0:9].reshape(3, 3)
        mdot = f[9:18].reshape(3, 3)
        mddot = f[18:27].reshape(3, 3)
        b_pos = f[27:30]
        b_acc = f[30:33]
        nb = len(p.bodies)
        body_pos = f[33:33 + 3 * nb].reshape(nb, 3)

        r = np.asarray(state[0:3], dtype=float)
        v = np.asarray(state[3:6], dtype=float)
        r_in = m @ r + b_pos

        acc = np.zeros(3)
        hess = np.zeros((3, 3)) if need_jacobian else None
        for i, b in enumerate(p.bodies):
            gm = b.gm_km3_s2 / p.lu_km**3 * p.tu_s**2
            d = r_in - body_pos[i]
            dn = np.linalg.norm(d)
            if dn < _COLLISION_RADIUS:
                raise DynamicsError(f"collision with {b.name}")
            acc -= gm * d / dn**3
            if b.differential:
                pn = np.linalg.norm(body_pos[i])
                acc -= gm * body_pos[i] / pn**3
            if need_jacobian:
                hess += _gravity_hessian(d, gm)

        if p.srp and p.srp_accel_mm_s2 > 0.0:
            sun_pos = f[33 + 3 * nb:36 + 3 * nb]
            s = r_in - sun_pos
            a_srp = (p.srp_accel_mm_s2 * 1e-6 / p.lu_km * p.tu_s**2
                     * p.reflectivity)
            acc += a_srp * s / np.linalg.norm(s)

        mt = m.T
        mtmdd = mt @ mddot
        mtmd = mt @ mdot
        rddot = mt @ (acc - b_acc) - mtmdd @ r - 2.0 * mtmd @ v
        deriv = np.concatenate([v, rddot])
        if not need_jacobian:
            return deriv, None
        a = np.zeros((6, 6))
        a[0:3, 3:6] = np.eye(3)
        a[3:6, 0:3] = mt @ hess @ m - mtmdd
        a[3:6, 3:6] = -2.0 * mtmd
        return deriv, a

    def derivative(self, t, state):
        return self._eval(t, state, need_jacobian=False)[0]

    def jacobian(self, t, state):
        return self._eval(t, state, need_jacobian=True)[1]

    def moon_position(self, t):
        return np.zeros(3)


def hfem_derivative(t, state, params: HfemParams, provider) -> np.ndarray:
    """One-shot evaluation of the high-fidelity equation of motion."""
    return HfemModel(params, provider).derivative(t, state)


# -- joint state/STM propagation ------------------------------------------------


@dataclass(frozen=True)
class StmSegment:
    """State transition matrix tied to a (t0, t1) interval."""

    phi: np.ndarray
    t0: float
    t1: float

    def compose(self, earlier: "StmSegment") -> "StmSegment":
        if abs(earlier.t1 - self.t0) > 1e-9:
            raise ValueError("segments are not contiguous")
        return StmSegment(phi=self.phi @ earlier.phi, t0=earlier.t0, t1=self.t1)

    @property
    def position_from_state(self) -> np.ndarray:
        return self.phi[0:3, :]

    @property
    def position_from_velocity(self) -> np.ndarray:
        return self.phi[0:3, 3:6]


def _joint_rhs(model):
    def rhs(t, z):
        deriv, a = model._eval(t, z[:6], True) if isinstance(model, HfemModel) \
            else (model.derivative(t, z[:6]), model.jacobian(t, z[:6]))
        dphi = a @ z[6:].reshape(6, 6)
        return np.concatenate([deriv, dphi.ravel()])
    return rhs


def propagate_with_stm(x0, t0: float, t1: float, model,
                       spec: IntegratorSpec = IntegratorSpec(),
                       t_eval=None):
    """Propagate the 42-dimensional joint state/STM system.

    Returns ``(final_state, StmSegment)`` and, when ``t_eval`` is given,
    additionally the sampled ``(times, states, stms)`` arrays.
    """
    x0 = np.asarray(x0, dtype=float)
    z0 = np.concatenate([x0, np.eye(6).ravel()])
    if t1 == t0:
        seg = StmSegment(phi=np.eye(6), t0=t0, t1=t1)
        if t_eval is not None:
            return x0.copy(), seg, (np.array([t0]), x0[None, :].copy(),
                                    np.eye(6)[None, :, :])
        return x0.copy(), seg
    spec_nodense = IntegratorSpec(rel_tol=spec.rel_tol, abs_tol=spec.abs_tol,
                                  max_step=spec.max_step, dense_output=False)
    traj = integrate(_joint_rhs(model), z0, t0, t1, spec_nodense, t_eval=t_eval)
    zf = traj.y_end
    seg = StmSegment(phi=zf[6:].reshape(6, 6).copy(), t0=t0, t1=t1)
    if t_eval is not None:
        states = traj.y[:, :6].copy()
        stms = traj.y[:, 6:].reshape(-1, 6, 6).copy()
        return zf[:6].copy(), seg, (traj.t.copy(), states, stms)
    return zf[:6].copy(), seg


def propagate_state(x0, t0: float, t1: float, model,
                    spec: IntegratorSpec = IntegratorSpec(),
                    t_eval=None, dense: bool = False) -> Trajectory:
    """State-only propagation convenience wrapper."""
    use_spec = spec if dense else IntegratorSpec(
        rel_tol=spec.rel_tol, abs_tol=spec.abs_tol, max_step=spec.max_step,
        dense_output=False)
    return integrate(model.derivative, np.asarray(x0, float), t0, t1,
                     use_spec, t_eval=t_eval)


_SPIN = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])

# Symplectic form of the rotating-frame flow in (r, v) coordinates; the
# canonical momenta are p = v + zhat x r, which folds the Coriolis block in.
SYMPLECTIC_FORM = np.block([[2.0 * _SPIN, np.eye(3)], [-np.eye(3), np.zeros((3, 3))]])


def symplectic_defect(phi: np.ndarray) -> float:
    """|| Phi^T J Phi - J || / ||J|| for the rotating-frame symplectic form."""
    j = SYMPLECTIC_FORM
    return float(np.linalg.norm(phi.T @ j @ phi - j) / np.linalg.norm(j))
