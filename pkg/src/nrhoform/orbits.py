"""Periodic orbit generation and long-duration reference trajectories.

Pipeline: a third-order analytic halo seed feeds a perpendicular-crossing
differential corrector; pseudo-arclength continuation walks the family to
the 9:2 resonant member; apoapsis states stacked over many revolutions
seed a free-time multiple-shooting solve against the ephemeris-driven
model, producing the reference trajectory everything downstream tracks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .bundleio import load_bundle, save_bundle
from .constants import DEFAULT_SYSTEM, EarthMoonSystem
from .dynamics import (
    Cr3bpModel,
    Cr3bpParams,
    HfemModel,
    StmSegment,
    collinear_equilibrium,
    propagate_state,
    propagate_with_stm,
    shift_origin,
)
from .frames import frame_matrices
from .numerics import IntegratorSpec, IntegrationError, integrate

_TIGHT = IntegratorSpec(rel_tol=1e-12, abs_tol=1e-12)


class OrbitError(RuntimeError):
    pass


@dataclass
class PeriodicOrbit:
    """A corrected periodic orbit of the restricted model."""

    initial_state: np.ndarray
    period: float
    params: Cr3bpParams
    family: str
    monodromy: StmSegment
    perilune_radius_km: float
    system: EarthMoonSystem = DEFAULT_SYSTEM
    correction_iterations: int = 0

    @property
    def jacobi(self) -> float:
        from .dynamics import jacobi_constant
        return jacobi_constant(self.initial_state, self.params)

    def save(self, path):
        save_bundle(path, meta={
            "kind": "periodic_orbit",
            "version": 1,
            "family": self.family,
            "mu": self.params.mu,
            "period": self.period,
            "perilune_radius_km": self.perilune_radius_km,
            "system": self.system.to_dict(),
        }, arrays={
            "initial_state": self.initial_state,
            "monodromy": self.monodromy.phi,
        })

    @classmethod
    def load(cls, path):
        meta, arrays = load_bundle(path)
        if meta.get("kind") != "periodic_orbit":
            raise OrbitError(f"{path}: not a periodic orbit artifact")
        params = Cr3bpParams(mu=float(meta["mu"]))
        period = float(meta["period"])
        return cls(initial_state=arrays["initial_state"], period=period,
                   params=params, family=meta["family"],
                   monodromy=StmSegment(arrays["monodromy"], 0.0, period),
                   perilune_radius_km=float(meta["perilune_radius_km"]))


# -- analytic halo seed -----------------------------------------------------------


def richardson_seed(p: Cr3bpParams, z_amplitude: float, southern: bool = True,
                    libration_index: int = 2):
    """Third-order analytic halo approximation at the plane crossing.

    ``z_amplitude`` is the out-of-plane amplitude in synodic length units.
    Returns (state at perpendicular crossing, half-period estimate).
    """
    mu = p.mu
    xl = collinear_equilibrium(p, libration_index)
    if libration_index == 2:
        gamma = xl - (1.0 - mu)

        def cn(n):
            return (((-1) ** n) * (mu + (1 - mu) * gamma ** (n + 1)
                                   / (1 + gamma) ** (n + 1))) / gamma**3
    elif libration_index == 1:
        gamma = (1.0 - mu) - xl

        def cn(n):
            return (mu + ((-1) ** n) * (1 - mu) * gamma ** (n + 1)
                    / (1 - gamma) ** (n + 1)) / gamma**3
    else:
        raise OrbitError("halo seed supports L1 and L2 only")

    c2, c3, c4 = cn(2), cn(3), cn(4)
    lam2 = (-(c2 - 2.0) + math.sqrt((c2 - 2.0) ** 2 + 4.0 * (c2 - 1.0) * (1.0 + 2.0 * c2))) / 2.0
    lam = math.sqrt(lam2)
    k = 2.0 * lam / (lam2 + 1.0 - c2)
    delta = lam2 - c2

    d1 = (3.0 * lam2 / k) * (k * (6.0 * lam2 - 1.0) - 2.0 * lam)
    d2 = (8.0 * lam2 / k) * (k * (11.0 * lam2 - 1.0) - 2.0 * lam)
    a21 = 3.0 * c3 * (k**2 - 2.0) / (4.0 * (1.0 + 2.0 * c2))
    a22 = 3.0 * c3 / (4.0 * (1.0 + 2.0 * c2))
    a23 = -(3.0 * c3 * lam / (4.0 * k * d1)) * (3.0 * k**3 * lam - 6.0 * k * (k - lam) + 4.0)
    a24 = -(3.0 * c3 * lam / (4.0 * k * d1)) * (2.0 + 3.0 * k * lam)
    b21 = -(3.0 * c3 * lam / (2.0 * d1)) * (3.0 * k * lam - 4.0)
    b22 = 3.0 * c3 * lam / d1
    d21 = -c3 / (2.0 * lam2)
    a31 = (-(9.0 * lam / (4.0 * d2)) * (4.0 * c3 * (k * a23 - b21) + k * c4 * (4.0 + k**2))
           + ((9.0 * lam2 + 1.0 - c2) / (2.0 * d2))
           * (3.0 * c3 * (2.0 * a23 - k * b21) + c4 * (2.0 + 3.0 * k**2)))
    a32 = (-(1.0 / d2) * ((9.0 * lam / 4.0) * (4.0 * c3 * (k * a24 - b22) + k * c4)
                          + 1.5 * (9.0 * lam2 + 1.0 - c2)
                          * (c3 * (k * b22 + d21 - 2.0 * a24) - c4)))
    b31 = ((3.0 / (8.0 * d2)) * (8.0 * lam * (3.0 * c3 * (k * b21 - 2.0 * a23)
                                              - c4 * (2.0 + 3.0 * k**2))
                                 + (9.0 * lam2 + 1.0 + 2.0 * c2)
                                 * (4.0 * c3 * (k * a23 - b21) + k * c4 * (4.0 + k**2))))
    b32 = ((1.0 / d2) * (9.0 * lam * (c3 * (k * b22 + d21 - 2.0 * a24) - c4)
                         + 0.375 * (9.0 * lam2 + 1.0 + 2.0 * c2)
                         * (4.0 * c3 * (k * a24 - b22) + k * c4)))
    d31 = (3.0 / (64.0 * lam2)) * (4.0 * c3 * a24 + c4)
    d32 = (3.0 / (64.0 * lam2)) * (4.0 * c3 * (a23 - d21) + c4 * (4.0 + k**2))
    denom = 2.0 * lam * (lam * (1.0 + k**2) - 2.0 * k)
    s1 = (1.0 / denom) * (1.5 * c3 * (2.0 * a21 * (k**2 - 2.0) - a23 * (k**2 + 2.0)
                                      - 2.0 * k * b21)
                          - 0.375 * c4 * (3.0 * k**4 - 8.0 * k**2 + 8.0))
    s2 = (1.0 / denom) * (1.5 * c3 * (2.0 * a22 * (k**2 - 2.0) + a24 * (k**2 + 2.0)
                                      + 2.0 * k * b22 + 5.0 * d21)
                          + 0.375 * c4 * (12.0 - k**2))
    l1 = -1.5 * c3 * (2.0 * a21 + a23 + 5.0 * d21) - 0.375 * c4 * (12.0 - k**2) + 2.0 * lam2 * s1
    l2 = 1.5 * c3 * (a24 - 2.0 * a22) + 1.125 * c4 + 2.0 * lam2 * s2

    az = z_amplitude / gamma
    ax2 = (-delta - l2 * az**2) / l1
    if ax2 <= 0:
        raise OrbitError("no halo amplitude solution at this z amplitude")
    ax = math.sqrt(ax2)
    dn = -1.0 if southern else 1.0
    omega = 1.0 + s1 * ax**2 + s2 * az**2
    period = 2.0 * math.pi / (lam * omega)

    # state at tau1 = 0 (perpendicular plane crossing)
    x = (a21 * ax**2 + a22 * az**2 - ax + (a23 * ax**2 - a24 * az**2)
         + (a31 * ax**3 - a32 * ax * az**2))
    z = dn * (az + d21 * ax * az * (1.0 - 3.0) + (d32 * az * ax**2 - d31 * az**3))
    vy = lam * omega * (k * ax + 2.0 * (b21 * ax**2 - b22 * az**2)
                        + 3.0 * (b31 * ax**3 - b32 * ax * az**2))
    state = np.array([xl + gamma * x, 0.0, gamma * z, 0.0, gamma * vy, 0.0])
    return state, period / 2.0


# -- differential correction ------------------------------------------------------


def _crossing_with_stm(y0, p: Cr3bpParams, t_max: float,
                       spec: IntegratorSpec = _TIGHT):
    """Propagate to the next perpendicular-plane crossing, with STM."""
    model = Cr3bpModel(p)
    vy0 = y0[4]
    direction = -float(np.sign(vy0)) if vy0 != 0 else 0.0

    def plane(t, z):
        return z[1]
    plane.terminal = True
    plane.direction = direction

    from .dynamics import _joint_rhs
    z0 = np.concatenate([y0, np.eye(6).ravel()])
    traj = integrate(_joint_rhs(model), z0, 0.0, t_max,
                     IntegratorSpec(spec.rel_tol, spec.abs_tol, spec.max_step, False),
                     events=[plane])
    if not traj.t_events or len(traj.t_events[0]) == 0:
        raise OrbitError("no plane crossing found within the time guard")
    t_c = float(traj.t_events[0][0])
    z_c = traj.y_events[0][0]
    return t_c, z_c[:6].copy(), z_c[6:].reshape(6, 6).copy()


_FREE_COLUMNS = {"z": [0, 4], "x": [2, 4], None: [0, 2, 4]}


def _crossing_residual_system(y0, p, t_max, spec=_TIGHT):
    """Crossing residual (vx, vz), its sensitivity rows, and crossing data."""
    t_c, y_c, phi = _crossing_with_stm(y0, p, t_max, spec)
    f_c = Cr3bpModel(p).derivative(t_c, y_c)
    vy_c = y_c[4]
    if abs(vy_c) < 1e-13:
        raise OrbitError("degenerate crossing (vy = 0)")
    # eliminate the crossing-time variation through the y = 0 condition
    m_full = phi[[3, 5], :] - np.outer(f_c[[3, 5]], phi[1, :]) / vy_c
    g = y_c[[3, 5]]
    dt_row = -phi[1, :] / vy_c
    return g, m_full, t_c, y_c, dt_row


def correct_periodic_orbit(guess, half_period_guess: float, p: Cr3bpParams,
                           fix: str | None = "z", tol: float = 1e-11,
                           max_iter: int = 40,
                           spec: IntegratorSpec = _TIGHT,
                           family: str = "halo") -> PeriodicOrbit:
    """Newton correction of a perpendicular plane crossing into a periodic orbit.

    The free variables are chosen by ``fix``: hold z0 ("z", default), hold
    x0 ("x"), or correct (x0, z0, vy0) with a minimum-norm update (None).
    """
    y0 = np.asarray(guess, dtype=float).copy()
    y0[1] = y0[3] = y0[5] = 0.0
    cols = _FREE_COLUMNS[fix]
    t_guard = 4.0 * abs(half_period_guess)
    iterations = 0
    g, m_full, t_c, _, _ = _crossing_residual_system(y0, p, t_guard, spec)
    res = float(np.max(np.abs(g)))
    while res > tol:
        if iterations >= max_iter:
            raise OrbitError(f"corrector did not converge: residual {res:.2e}")
        m_sel = m_full[:, cols]
        if len(cols) == 2:
            try:
                step = np.linalg.solve(m_sel, -g)
            except np.linalg.LinAlgError as exc:
                raise OrbitError("singular correction matrix") from exc
        else:
            step, *_ = np.linalg.lstsq(m_sel, -g, rcond=None)
        damping = 1.0
        for _ in range(6):
            trial = y0.copy()
            trial[cols] += damping * step
            try:
                g_t, m_t, t_t, _, _ = _crossing_residual_system(trial, p, t_guard, spec)
            except (OrbitError, IntegrationError):
                damping *= 0.5
                continue
            if np.max(np.abs(g_t)) < res or damping < 0.1:
                y0, g, m_full, t_c = trial, g_t, m_t, t_t
                res = float(np.max(np.abs(g)))
                break
            damping *= 0.5
        else:
            raise OrbitError("corrector line search failed")
        iterations += 1

    period = 2.0 * t_c
    model = Cr3bpModel(p)
    xf, mono = propagate_with_stm(y0, 0.0, period, model, spec)
    closure = float(np.linalg.norm(xf - y0))
    if closure > 1e-9:
        raise OrbitError(f"orbit closure error {closure:.2e}")
    peri_km = _perilune_radius_km(y0, period, model, p)
    return PeriodicOrbit(initial_state=y0, period=period, params=p,
                         family=family, monodromy=mono,
                         perilune_radius_km=peri_km,
                         correction_iterations=iterations)


def _perilune_radius_km(y0, period, model, p, system: EarthMoonSystem = DEFAULT_SYSTEM):
    traj = propagate_state(y0, 0.0, period, model, _TIGHT, dense=True)
    moon = np.array([1.0 - p.mu, 0.0, 0.0])
    ts = np.linspace(0.0, period, 2000)
    d = np.linalg.norm(traj(ts)[:, 0:3] - moon, axis=1)
    k = int(np.argmin(d))
    lo, hi = ts[max(k - 1, 0)], ts[min(k + 1, len(ts) - 1)]
    out = minimize_scalar(lambda t: np.linalg.norm(traj(float(t))[0:3] - moon),
                          bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12})
    return float(out.fun) * system.lu_km


# -- family continuation ----------------------------------------------------------


def continue_family_to_period(orbit: PeriodicOrbit, target_period: float,
                              ds: float = 5e-3, max_steps: int = 600,
                              spec: IntegratorSpec = _TIGHT,
                              min_perilune_km: float = 1800.0,
                              system: EarthMoonSystem = DEFAULT_SYSTEM,
                              period_rtol: float = 5e-8) -> PeriodicOrbit:
    """Pseudo-arclength continuation along the halo family to a target period.

    Walks (x0, z0, vy0) along the one-parameter family until the orbital
    period brackets the target, then solves the period-constrained system
    directly.  Raises if the family would pass inside the minimum perilune
    radius first.
    """
    p = orbit.params
    cols = [0, 2, 4]

    def pack(y0):
        return y0[cols].copy()

    def unpack(u):
        y0 = np.zeros(6)
        y0[cols] = u
        return y0

    def fam_system(u, t_guard):
        y0 = unpack(u)
        g, m_full, t_c, _, _ = _crossing_residual_system(y0, p, t_guard, spec)
        return g, m_full[:, cols], t_c

    u = pack(orbit.initial_state)
    t_guard = 4.0 * orbit.period / 2.0
    g, jac, t_half = fam_system(u, t_guard)

    def tangent_of(jac_now, prev=None):
        _, _, vt = np.linalg.svd(jac_now)
        tau = vt[-1]
        if prev is not None and tau @ prev < 0:
            tau = -tau
        return tau / np.linalg.norm(tau)

    # choose the march direction that moves the period toward the target
    tau = tangent_of(jac)
    probe = 1e-4
    periods = []
    for sign in (+1.0, -1.0):
        try:
            _, _, t_p = fam_system(u + sign * probe * tau, t_guard)
            periods.append(2.0 * t_p)
        except OrbitError:
            periods.append(np.inf)
    if abs(periods[1] - target_period) < abs(periods[0] - target_period):
        tau = -tau

    period_prev = 2.0 * t_half
    u_prev = u.copy()
    step = ds
    for _ in range(max_steps):
        u_pred = u + step * tau
        u_new, ok, t_half_new, jac_new = _arclength_corrector(
            u_pred, tau, fam_system, t_guard)
        if not ok:
            step *= 0.5
            if step < 1e-7:
                raise OrbitError("continuation stalled (step underflow)")
            continue
        period_new = 2.0 * t_half_new
        if (period_prev - target_period) * (period_new - target_period) <= 0.0:
            # bracketed: solve with the period as an explicit constraint
            return _solve_at_period(u_new, p, target_period, t_guard, spec,
                                    system, period_rtol)
        peri_km = _quick_perilune_km(unpack(u_new), 2.0 * t_half_new, p, system)
        if peri_km < min_perilune_km:
            raise OrbitError(
                f"family reached perilune floor ({peri_km:.0f} km) before target period")
        tau = tangent_of(jac_new, prev=tau)
        u_prev, u = u, u_new
        period_prev = period_new
        t_guard = 4.0 * t_half_new
        step = min(step * 1.3, 4.0 * ds)
    raise OrbitError("continuation exceeded the step budget")


def _arclength_corrector(u_pred, tau, fam_system, t_guard, tol=1e-11,
                         max_iter=12):
    u = u_pred.copy()
    jac = None
    for _ in range(max_iter):
        try:
            g, jac, t_half = fam_system(u, t_guard)
        except (OrbitError, IntegrationError):
            return u, False, None, None
        arc = tau @ (u - u_pred)
        rhs = np.concatenate([g, [arc]])
        if np.max(np.abs(rhs)) < tol:
            return u, True, t_half, jac
        full = np.vstack([jac, tau[None, :]])
        try:
            du = np.linalg.solve(full, -rhs)
        except np.linalg.LinAlgError:
            return u, False, None, None
        u = u + du
    return u, False, None, None


def _solve_at_period(u0, p, target_period, t_guard, spec, system, period_rtol):
    cols = [0, 2, 4]
    u = u0.copy()
    for _ in range(30):
        y0 = np.zeros(6)
        y0[cols] = u
        g, m_full, t_c, _, dt_row = _crossing_residual_system(y0, p, t_guard, spec)
        res = np.concatenate([g, [2.0 * t_c - target_period]])
        if np.max(np.abs(g)) < 1e-11 and abs(res[2]) < period_rtol * target_period:
            orbit = correct_periodic_orbit(y0, t_c, p, fix="z", spec=spec,
                                           family="nrho")
            return orbit
        jac = np.vstack([m_full[:, cols], 2.0 * dt_row[cols][None, :]])
        du = np.linalg.solve(jac, -res)
        # keep steps small enough to stay in the corrector basin
        scale = min(1.0, 2e-3 / max(np.max(np.abs(du)), 1e-16))
        u = u + scale * du
    raise OrbitError("period-targeting solve did not converge")


def _quick_perilune_km(y0, period, p, system):
    model = Cr3bpModel(p)
    traj = propagate_state(y0, 0.0, period, model,
                           IntegratorSpec(1e-10, 1e-10), dense=True)
    moon = np.array([1.0 - p.mu, 0.0, 0.0])
    ts = np.linspace(0.0, period, 800)
    d = np.linalg.norm(traj(ts)[:, 0:3] - moon, axis=1)
    return float(d.min()) * system.lu_km


def find_nrho_9_2(system: EarthMoonSystem = DEFAULT_SYSTEM,
                  seed_z_amplitude: float = 0.06,
                  spec: IntegratorSpec = _TIGHT) -> PeriodicOrbit:
    """Southern L2 member with the 9:2 lunar synodic resonance period.

    The returned orbit is phased to its apolune plane crossing, matching
    the patch-point and maneuver-placement conventions downstream.
    """
    p = Cr3bpParams(mu=system.mu)
    y_seed, t_half = richardson_seed(p, seed_z_amplitude, southern=True)
    orbit = correct_periodic_orbit(y_seed, t_half, p, fix="z", spec=spec)
    target = system.resonant_period_9_2
    orbit = continue_family_to_period(orbit, target, system=system, spec=spec)
    orbit = rephase_to_apolune(orbit, spec=spec)
    if orbit.initial_state[2] > 0:
        # the model is symmetric under z -> -z; take the southern twin
        mirrored = orbit.initial_state * np.array([1, 1, -1, 1, 1, -1.0])
        orbit = correct_periodic_orbit(mirrored, orbit.period / 2.0, p,
                                       fix="z", spec=spec, family=orbit.family)
    return orbit


def rephase_to_apolune(orbit: PeriodicOrbit, spec: IntegratorSpec = _TIGHT) -> PeriodicOrbit:
    """Move the orbit's initial state to its apolune plane crossing."""
    p = orbit.params
    moon = np.array([1.0 - p.mu, 0.0, 0.0])
    x_half, _ = propagate_with_stm(orbit.initial_state, 0.0, orbit.period / 2.0,
                                   Cr3bpModel(p), spec)
    x_half = x_half.copy()
    x_half[[1, 3, 5]] = 0.0  # symmetric crossing, clean numerical residue
    d0 = np.linalg.norm(orbit.initial_state[0:3] - moon)
    dh = np.linalg.norm(x_half[0:3] - moon)
    if d0 >= dh:
        return orbit
    return correct_periodic_orbit(x_half, orbit.period / 2.0, p, fix="z",
                                  spec=spec, family=orbit.family)


# -- reference trajectory (multiple shooting) -------------------------------------


@dataclass
class ReferenceTrajectory:
    """Converged long-duration reference with dense state and STM access.

    Patch points sit at apolune, one per revolution.  ``stm`` composes the
    stored per-segment transition matrices so queries across many
    revolutions never invert an ill-conditioned long-span matrix.
    """

    model: object
    system: EarthMoonSystem
    patch_times: np.ndarray
    patch_states: np.ndarray
    segments: list
    seg_stms: np.ndarray
    perilune_epochs: np.ndarray = field(default_factory=lambda: np.empty(0))
    apolune_epochs: np.ndarray = field(default_factory=lambda: np.empty(0))
    meta: dict = field(default_factory=dict)
    _stream: dict | None = None

    # -- state access ---------------------------------------------------------

    @property
    def span(self):
        return float(self.patch_times[0]), float(self.patch_times[-1])

    @property
    def n_revs(self) -> int:
        return len(self.patch_times) - 1

    def _segment_index(self, t: float) -> int:
        lo, hi = self.span
        if not (lo - 1e-12 <= t <= hi + 1e-12):
            raise OrbitError(f"t={t} outside reference span [{lo}, {hi}]")
        k = int(np.searchsorted(self.patch_times, t, side="right") - 1)
        return min(max(k, 0), len(self.segments) - 1)

    def state(self, t):
        if np.ndim(t):
            return np.array([self.state(float(ti)) for ti in np.asarray(t)])
        k = self._segment_index(float(t))
        return self.segments[k](float(t))

    def moon_position(self, t):
        return self.model.moon_position(t)

    # -- STM access -------------------------------------------------------------

    def build_stm_stream(self, grid_per_rev: int = 512, extra_times=(),
                         spec: IntegratorSpec = _TIGHT):
        """Sample Phi(t, segment start) on a fine grid for every segment."""
        times = []
        seg_idx = []
        phis = []
        extra = np.sort(np.asarray(extra_times, dtype=float))
        for k in range(len(self.segments)):
            t0, t1 = self.patch_times[k], self.patch_times[k + 1]
            grid = np.linspace(t0, t1, grid_per_rev + 1)
            ins = extra[(extra > t0) & (extra < t1)]
            grid = np.unique(np.concatenate([grid, ins]))
            _, _, (ts, xs, stms) = propagate_with_stm(
                self.patch_states[k], t0, t1, self.model, spec, t_eval=grid)
            times.append(ts)
            seg_idx.append(np.full(len(ts), k))
            phis.append(stms)
        self._stream = {
            "t": np.concatenate(times),
            "seg": np.concatenate(seg_idx),
            "phi": np.concatenate(phis, axis=0),
        }
        return self

    def _stream_node(self, t: float):
        s = self._stream
        if s is None:
            return None
        j = np.searchsorted(s["t"], t)
        for cand in (j, j - 1, j + 1):
            if 0 <= cand < len(s["t"]) and abs(s["t"][cand] - t) < 1e-10:
                return cand
        return None

    def _phi_in_segment(self, t: float, k: int) -> np.ndarray:
        """Phi(t, patch_times[k]) for t inside segment k."""
        if abs(t - self.patch_times[k]) < 1e-12:
            return np.eye(6)
        if abs(t - self.patch_times[k + 1]) < 1e-12:
            return self.seg_stms[k]
        node = self._stream_node(t)
        if node is not None and self._stream["seg"][node] == k:
            return self._stream["phi"][node]
        _, seg = propagate_with_stm(self.patch_states[k], self.patch_times[k],
                                    t, self.model, _TIGHT)
        return seg.phi

    def stm(self, t_from: float, t_to: float) -> StmSegment:
        """Phi(t_to, t_from), composed segment by segment."""
        if t_to < t_from:
            inv = self.stm(t_to, t_from)
            return StmSegment(np.linalg.inv(inv.phi), t_from, t_to)
        ka, kb = self._segment_index(t_from), self._segment_index(t_to)
        phi_a = self._phi_in_segment(t_from, ka)  # Phi(t_from, tau_ka)
        phi_b = self._phi_in_segment(t_to, kb)
        if ka == kb:
            phi = phi_b @ np.linalg.inv(phi_a)
        else:
            acc = self.seg_stms[ka] @ np.linalg.inv(phi_a)  # Phi(tau_{ka+1}, t_from)
            for k in range(ka + 1, kb):
                acc = self.seg_stms[k] @ acc
            phi = phi_b @ acc
        return StmSegment(phi, t_from, t_to)

    def stream_between(self, t_from: float, t_to: float):
        """Grid times in [t_from, t_to] and Phi(t_i, t_from) at each.

        Requires the STM stream; ``t_from`` may be any time inside the span.
        """
        if self._stream is None:
            raise OrbitError("build_stm_stream must be called first")
        s = self._stream
        mask = (s["t"] >= t_from - 1e-12) & (s["t"] <= t_to + 1e-12)
        ts = s["t"][mask]
        segs = s["seg"][mask]
        phis_rel = s["phi"][mask]
        ka = self._segment_index(t_from)
        phi_a = self._phi_in_segment(t_from, ka)
        base = {ka: np.linalg.inv(phi_a)}  # Phi(tau_k, t_from) per segment k
        out = np.empty_like(phis_rel)
        for k in range(ka + 1, int(segs.max(initial=ka)) + 1):
            base[k] = self.seg_stms[k - 1] @ base[k - 1]
        for i in range(len(ts)):
            out[i] = phis_rel[i] @ base[int(segs[i])]
        keep = ts >= t_from - 1e-12
        return ts[keep], out[keep]

    # -- serialization ------------------------------------------------------------

    def save(self, path, grid_per_rev: int = 512):
        ts = []
        xs = []
        for k, seg in enumerate(self.segments):
            grid = np.linspace(self.patch_times[k], self.patch_times[k + 1],
                               grid_per_rev, endpoint=False)
            ts.append(grid)
            xs.append(seg(grid))
        ts.append(self.patch_times[-1:])
        xs.append(self.patch_states[-1:])
        meta = dict(self.meta)
        meta.update({"kind": "reference_trajectory", "version": 1,
                     "system": self.system.to_dict(),
                     "model": getattr(self.model, "name", "unknown")})
        save_bundle(path, meta=meta, arrays={
            "patch_times": self.patch_times,
            "patch_states": self.patch_states,
            "seg_stms": self.seg_stms,
            "grid_t": np.concatenate(ts),
            "grid_x": np.concatenate(xs, axis=0),
            "perilune_epochs": self.perilune_epochs,
            "apolune_epochs": self.apolune_epochs,
        })

    @classmethod
    def load(cls, path, model, system: EarthMoonSystem = DEFAULT_SYSTEM):
        """Reload a saved reference; states interpolate off the stored grid."""
        meta, arrays = load_bundle(path)
        if meta.get("kind") != "reference_trajectory":
            raise OrbitError(f"{path}: not a reference trajectory artifact")
        patch_times = arrays["patch_times"]
        segments = []
        grid_t, grid_x = arrays["grid_t"], arrays["grid_x"]
        for k in range(len(patch_times) - 1):
            mask = (grid_t >= patch_times[k] - 1e-12) & (grid_t <= patch_times[k + 1] + 1e-12)
            segments.append(_GridInterpolant(grid_t[mask], grid_x[mask], model))
        return cls(model=model, system=system, patch_times=patch_times,
                   patch_states=arrays["patch_states"], segments=segments,
                   seg_stms=arrays["seg_stms"],
                   perilune_epochs=arrays["perilune_epochs"],
                   apolune_epochs=arrays["apolune_epochs"], meta=meta)

    def export_csv(self, path, grid_per_rev: int = 256):
        """Human-readable dense rows (normalized units)."""
        lo, hi = self.span
        ts = np.linspace(lo, hi, grid_per_rev * self.n_revs + 1)
        xs = self.state(ts)
        with open(path, "w") as fh:
            fh.write("t_norm,x,y,z,vx,vy,vz\n")
            for t, x in zip(ts, xs):
                fh.write(",".join(repr(float(v)) for v in [t, *x]) + "\n")


class _GridInterpolant:
    """Cubic Hermite state interpolation over stored (t, state) rows."""

    def __init__(self, ts, xs, model):
        self.ts = ts
        self.xs = xs
        self.model = model

    def __call__(self, t):
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((len(t_arr), 6))
        for i, ti in enumerate(t_arr):
            k = int(np.clip(np.searchsorted(self.ts, ti) - 1, 0, len(self.ts) - 2))
            h = self.ts[k + 1] - self.ts[k]
            u = (ti - self.ts[k]) / h
            p0, p1 = self.xs[k], self.xs[k + 1]
            m0 = self.model.derivative(self.ts[k], p0)
            m1 = self.model.derivative(self.ts[k + 1], p1)
            h00 = 2 * u**3 - 3 * u**2 + 1
            h10 = u**3 - 2 * u**2 + u
            h01 = -2 * u**3 + 3 * u**2
            h11 = u**3 - u**2
            out[i] = h00 * p0 + h10 * h * m0 + h01 * p1 + h11 * h * m1
        return out[0] if np.ndim(t) == 0 else out


def stack_and_converge(orbit: PeriodicOrbit, n_revs: int, epoch0_s: float,
                       model: HfemModel, tol: float = 1e-10,
                       max_iter: int = 40, tube_km: float = 10000.0,
                       spec: IntegratorSpec = _TIGHT) -> ReferenceTrajectory:
    """Multiple-shooting convergence of a stacked periodic orbit.

    Apoapsis states of the restricted-model orbit are stacked one per
    revolution starting at ``epoch0_s`` and corrected against the
    high-fidelity model with free patch states and times, minimum-norm
    Newton updates, and a damped line search.
    """
    if n_revs < 2:
        raise OrbitError("need at least 2 revolutions")
    system = model.system
    p = orbit.params

    # apolune crossing of the periodic orbit (the crossing farther from the Moon)
    moon = np.array([1.0 - p.mu, 0.0, 0.0])
    x_half, _ = propagate_with_stm(orbit.initial_state, 0.0, orbit.period / 2.0,
                                   Cr3bpModel(p), spec)
    d0 = np.linalg.norm(orbit.initial_state[0:3] - moon)
    dh = np.linalg.norm(x_half[0:3] - moon)
    x_apo = orbit.initial_state if d0 > dh else x_half

    t0 = epoch0_s / system.tu_s
    n_patch = n_revs + 1
    times = t0 + orbit.period * np.arange(n_patch)
    states = np.tile(shift_origin(x_apo, system, to="moon"), (n_patch, 1))

    if model._cache is None:
        model.build_cache(times[0] - 0.5, times[-1] + 0.5)

    def residual_and_jacobian(times_k, states_k):
        n_seg = n_patch - 1
        f_vec = np.zeros(6 * n_seg)
        jac = np.zeros((6 * n_seg, 7 * n_patch))  # unknowns: states then times
        ends = np.zeros((n_seg, 6))
        stms = np.zeros((n_seg, 6, 6))
        for k in range(n_seg):
            xf, seg = propagate_with_stm(states_k[k], times_k[k], times_k[k + 1],
                                         model, spec)
            ends[k] = xf
            stms[k] = seg.phi
            rows = slice(6 * k, 6 * k + 6)
            f_vec[rows] = xf - states_k[k + 1]
            jac[rows, 6 * k:6 * k + 6] = seg.phi
            jac[rows, 6 * (k + 1):6 * (k + 1) + 6] = -np.eye(6)
            f_start = model.derivative(times_k[k], states_k[k])
            f_end = model.derivative(times_k[k + 1], xf)
            jac[rows, 6 * n_patch + k] = -seg.phi @ f_start
            jac[rows, 6 * n_patch + k + 1] = f_end
        return f_vec, jac, stms, ends

    f_vec, jac, stms, _ = residual_and_jacobian(times, states)
    res = float(np.max(np.abs(f_vec)))
    for iteration in range(max_iter):
        if res < tol:
            break
        dz, *_ = np.linalg.lstsq(jac, -f_vec, rcond=None)
        damping = 1.0
        for _ in range(6):
            trial_states = states + damping * dz[:6 * n_patch].reshape(n_patch, 6)
            trial_times = times + damping * dz[6 * n_patch:]
            if np.any(np.diff(trial_times) <= 0.1 * orbit.period):
                damping *= 0.5
                continue
            try:
                f_t, jac_t, stms_t, _ = residual_and_jacobian(trial_times, trial_states)
            except (IntegrationError, OrbitError):
                damping *= 0.5
                continue
            if np.max(np.abs(f_t)) < res:
                states, times = trial_states, trial_times
                f_vec, jac, stms = f_t, jac_t, stms_t
                res = float(np.max(np.abs(f_vec)))
                break
            damping *= 0.5
        else:
            raise OrbitError(f"multiple shooting stalled at residual {res:.2e}")
    else:
        raise OrbitError(f"multiple shooting did not converge: residual {res:.2e}")

    # stay within the configured tube of the stacked guess
    guess_pos = shift_origin(x_apo, system, to="moon")[0:3]
    excursion = np.linalg.norm(states[:, 0:3] - guess_pos, axis=1).max() * system.lu_km
    if excursion > tube_km:
        raise OrbitError(f"converged reference left the {tube_km:.0f} km tube "
                         f"({excursion:.0f} km)")

    segments = [propagate_state(states[k], times[k], times[k + 1], model,
                                spec, dense=True)
                for k in range(n_patch - 1)]
    wrapped = [_DenseSegment(seg) for seg in segments]
    traj = ReferenceTrajectory(
        model=model, system=system, patch_times=times, patch_states=states,
        segments=wrapped, seg_stms=stms,
        meta={"epoch0_s": epoch0_s, "orbit_period": orbit.period,
              "shooting_residual": res, "tube_excursion_km": excursion})
    peri, apo = find_apsis_epochs(traj, "perilune"), find_apsis_epochs(traj, "apolune")
    traj.perilune_epochs = peri
    traj.apolune_epochs = apo
    return traj


class _DenseSegment:
    """Adapter exposing scipy dense output as state(t) over a segment."""

    def __init__(self, traj):
        self._sol = traj.sol

    def __call__(self, t):
        out = self._sol(t)
        return out.T if np.ndim(t) else out


def reference_from_periodic(orbit: PeriodicOrbit, n_revs: int,
                            system: EarthMoonSystem = DEFAULT_SYSTEM) -> ReferenceTrajectory:
    """Wrap a periodic orbit as a reference trajectory (restricted model)."""
    model = Cr3bpModel(orbit.params, system)
    t0 = 0.0
    times = t0 + orbit.period * np.arange(n_revs + 1)
    states = np.tile(orbit.initial_state, (n_revs + 1, 1))
    segments = []
    stms = np.zeros((n_revs, 6, 6))
    for k in range(n_revs):
        segments.append(_DenseSegment(propagate_state(
            states[k], times[k], times[k + 1], model, _TIGHT, dense=True)))
        stms[k] = orbit.monodromy.phi
    traj = ReferenceTrajectory(model=model, system=system, patch_times=times,
                               patch_states=states, segments=segments,
                               seg_stms=stms,
                               meta={"epoch0_s": 0.0,
                                     "orbit_period": orbit.period})
    traj.perilune_epochs = find_apsis_epochs(traj, "perilune")
    traj.apolune_epochs = find_apsis_epochs(traj, "apolune")
    return traj


# -- apsides and anomaly ----------------------------------------------------------


def find_apsis_epochs(traj: ReferenceTrajectory, kind: str,
                      samples_per_rev: int = 600) -> np.ndarray:
    """Epochs of lunar-distance extrema, refined by root finding on r.v."""
    if kind not in ("perilune", "apolune"):
        raise ValueError("kind must be 'perilune' or 'apolune'")
    lo, hi = traj.span
    n = samples_per_rev * max(traj.n_revs, 1)
    ts = np.linspace(lo, hi, n + 1)
    xs = traj.state(ts)

    def radial_rate(t):
        x = traj.state(float(t))
        rel = x[0:3] - traj.moon_position(float(t))
        return float(rel @ x[3:6])

    rel = xs[:, 0:3] - np.array([traj.moon_position(float(t)) for t in ts])
    g = np.einsum("ij,ij->i", rel, xs[:, 3:6])
    out = []
    want_min = kind == "perilune"
    for i in range(len(ts) - 1):
        if g[i] == 0.0:
            continue
        if g[i] < 0 < g[i + 1] and want_min:
            out.append(brentq(radial_rate, ts[i], ts[i + 1], xtol=1e-12))
        elif g[i] > 0 > g[i + 1] and not want_min:
            out.append(brentq(radial_rate, ts[i], ts[i + 1], xtol=1e-12))
    return np.array(out)


def true_anomaly(traj: ReferenceTrajectory, t: float,
                 provider=None) -> float:
    """Osculating two-body true anomaly about the Moon, degrees in [0, 360).

    Computed from the instantaneous Moon-centered inertial state; zero at
    perilune.
    """
    system = traj.system
    prov = provider or getattr(traj.model, "provider", None)
    if prov is None:
        from .ephemeris import CircularProvider
        prov = CircularProvider(system, include_sun=False)
    x = traj.state(float(t))
    rel = x[0:3] - traj.moon_position(float(t))
    vel = x[3:6]
    t_s = float(t) * system.tu_s
    m, mdot = frame_matrices(prov, t_s)
    r_in = m @ (rel * system.lu_km)
    v_in = mdot @ (rel * system.lu_km) + m @ (vel * system.vu_kms)
    gm = system.gm_moon
    h = np.cross(r_in, v_in)
    if np.linalg.norm(h) < 1e-12:
        raise OrbitError("degenerate (rectilinear) osculating orbit")
    e_vec = np.cross(v_in, h) / gm - r_in / np.linalg.norm(r_in)
    e = np.linalg.norm(e_vec)
    if e < 1e-10:
        raise OrbitError("degenerate (circular) osculating orbit")
    cosnu = float(np.clip(e_vec @ r_in / (e * np.linalg.norm(r_in)), -1.0, 1.0))
    nu = math.degrees(math.acos(cosnu))
    if float(r_in @ v_in) < 0.0:
        nu = 360.0 - nu
    return nu % 360.0
