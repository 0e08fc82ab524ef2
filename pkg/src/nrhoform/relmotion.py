"""Bounded relative motion from near-unimodular STM modes.

A finite-span state transition matrix of the reference trajectory is
eigendecomposed; the most central non-trivial complex pair spans an
osculating invariant circle.  Placing agents on that circle by radius and
phase and mapping them through the STM yields quasi-periodic relative
orbits (QPROs) valid over the span the STM was built from.  Local
toroidal coordinates re-express relative states in the circle's moving
basis, which makes on-torus motion trivially recognizable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import StmSegment
from .numerics import eig


class RelMotionError(RuntimeError):
    pass


@dataclass
class CentralMode:
    """Near-unimodular eigenpair of a finite-span STM.

    The complex eigenvector w_r + i w_i is phase-rotated so the position
    parts of w_r and w_i are orthogonal with ||position(w_r)|| = 1, which
    pins the meaning of the circle radius in length units.
    """

    eigenvalue: complex
    w_r: np.ndarray
    w_i: np.ndarray
    t0: float
    t1: float
    stm_condition_number: float

    @property
    def e_r(self) -> float:
        return float(self.eigenvalue.real)

    @property
    def e_i(self) -> float:
        return float(self.eigenvalue.imag)


def _canonicalize(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotate the complex phase so position parts are orthogonal, |r_r| = 1."""
    r_r, r_i = w.real[0:3], w.imag[0:3]
    a = float(r_r @ r_i)
    b = float(r_r @ r_r - r_i @ r_i)
    psi = 0.5 * math.atan2(-2.0 * a, b) if (a != 0.0 or b != 0.0) else 0.0
    best = None
    for cand in (psi, psi + 0.5 * math.pi):
        wc = w * np.exp(1j * cand)
        nr = np.linalg.norm(wc.real[0:3])
        if best is None or nr > best[0]:
            best = (nr, wc)
    nr, wc = best
    if nr < 1e-14:
        raise RelMotionError("mode has no position content")
    wc = wc / nr
    # deterministic sign: largest position component of w_r positive
    r = wc.real[0:3]
    if r[int(np.argmax(np.abs(r)))] < 0:
        wc = -wc
    return wc.real.copy(), wc.imag.copy()


def central_mode(stm: StmSegment, ref_velocity, band=(0.9, 1.1),
                 cond_cap: float = 1e9) -> CentralMode:
    """Most central non-trivial complex mode of a state transition matrix.

    The pair whose position content aligns best with the reference
    velocity direction is the along-track (trivial) mode and is excluded
    when more than one candidate pair survives the unimodularity band.
    """
    dec = eig(stm.phi)
    if dec.condition_number > cond_cap:
        raise RelMotionError(
            f"STM condition number {dec.condition_number:.2e} above cap {cond_cap:.0e}")
    vhat = np.asarray(ref_velocity, dtype=float)
    vn = np.linalg.norm(vhat)
    if vn == 0:
        raise RelMotionError("zero reference velocity")
    vhat = vhat / vn

    candidates = []
    for lam, w in zip(dec.eigenvalues, dec.eigenvectors.T):
        if lam.imag <= 1e-12:
            continue  # one member per conjugate pair; real modes are not circles
        if not band[0] <= abs(lam) <= band[1]:
            continue
        r_r, r_i = w.real[0:3], w.imag[0:3]
        nr, ni = np.linalg.norm(r_r), np.linalg.norm(r_i)
        if max(nr, ni) < 1e-14:
            continue
        align = max(abs(r_r @ vhat) / nr if nr > 0 else 0.0,
                    abs(r_i @ vhat) / ni if ni > 0 else 0.0)
        candidates.append((lam, w, align))
    if not candidates:
        raise RelMotionError("no complex eigenvalue within the unimodularity band")
    if len(candidates) > 1:
        drop = max(range(len(candidates)), key=lambda i: candidates[i][2])
        candidates = [c for i, c in enumerate(candidates) if i != drop]
    lam, w, _ = min(candidates, key=lambda c: abs(math.log(abs(c[0]))))
    w_r, w_i = _canonicalize(w)
    return CentralMode(eigenvalue=complex(lam), w_r=w_r, w_i=w_i,
                       t0=stm.t0, t1=stm.t1,
                       stm_condition_number=dec.condition_number)


def invariant_circle_point(mode: CentralMode, radius: float,
                           theta1: float) -> np.ndarray:
    """Point on the osculating invariant circle at phase theta1."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    return radius * (math.cos(theta1) * mode.w_r - math.sin(theta1) * mode.w_i)


@dataclass
class QproReference:
    """Per-agent relative reference sampled along the validity span."""

    mode: CentralMode
    radius: float
    phases: np.ndarray          # (M,)
    t_grid: np.ndarray          # (n,)
    states: np.ndarray          # (M, n, 6)
    range_ratio: float

    @property
    def t0(self) -> float:
        return float(self.t_grid[0])

    @property
    def t1(self) -> float:
        return float(self.t_grid[-1])

    @property
    def n_agents(self) -> int:
        return len(self.phases)

    def state(self, agent: int, t: float) -> np.ndarray:
        """Relative reference of one agent, Hermite-interpolated off the grid."""
        tg = self.t_grid
        if not (tg[0] - 1e-12 <= t <= tg[-1] + 1e-12):
            raise RelMotionError(f"t={t} outside QPRO validity [{tg[0]}, {tg[-1]}]")
        j = np.searchsorted(tg, t)
        for cand in (j, j - 1, j + 1):
            if 0 <= cand < len(tg) and abs(tg[cand] - t) < 1e-10:
                return self.states[agent, cand].copy()
        k = int(np.clip(j - 1, 0, len(tg) - 2))
        h = tg[k + 1] - tg[k]
        u = (t - tg[k]) / h
        p0, p1 = self.states[agent, k, 0:3], self.states[agent, k + 1, 0:3]
        v0, v1 = self.states[agent, k, 3:6], self.states[agent, k + 1, 3:6]
        h00 = 2 * u**3 - 3 * u**2 + 1
        h10 = u**3 - 2 * u**2 + u
        h01 = -2 * u**3 + 3 * u**2
        h11 = u**3 - u**2
        pos = h00 * p0 + h10 * h * v0 + h01 * p1 + h11 * h * v1
        d00, d10 = 6 * u**2 - 6 * u, 3 * u**2 - 4 * u + 1
        d01, d11 = -6 * u**2 + 6 * u, 3 * u**2 - 2 * u
        vel = (d00 * p0 + d01 * p1) / h + d10 * v0 + d11 * v1
        return np.concatenate([pos, vel])

    def states_at(self, t: float) -> np.ndarray:
        return np.array([self.state(k, t) for k in range(self.n_agents)])


def generate_qpro(traj, rev_window: tuple[int, int], radius: float, phases,
                  band=(0.9, 1.1), cond_cap: float = 1e9) -> QproReference:
    """Build a QPRO over an integer-revolution window of the reference.

    ``rev_window`` is (first_rev, n_revs); the window STM's central mode
    defines the invariant circle and each phase in ``phases`` places one
    agent on it.  Requires the reference STM stream (``build_stm_stream``).
    """
    first_rev, n_revs = rev_window
    if n_revs < 1:
        raise RelMotionError("window must span at least one revolution")
    if first_rev < 0 or first_rev + n_revs > traj.n_revs:
        raise RelMotionError("window outside the reference trajectory")
    t0 = float(traj.patch_times[first_rev])
    t1 = float(traj.patch_times[first_rev + n_revs])
    stm = traj.stm(t0, t1)
    v_ref = traj.state(t0)[3:6]
    mode = central_mode(stm, v_ref, band=band, cond_cap=cond_cap)

    phases = np.atleast_1d(np.asarray(phases, dtype=float))
    u0 = np.array([invariant_circle_point(mode, radius, th) for th in phases])
    ts, phis = traj.stream_between(t0, t1)
    # states[m, i] = Phi(t_i, t0) @ u0[m]
    states = np.einsum("nij,mj->mni", phis, u0)
    qpro = QproReference(mode=mode, radius=radius, phases=phases,
                         t_grid=ts, states=states, range_ratio=np.nan)
    qpro.range_ratio = range_ratio(qpro)
    return qpro


def range_ratio(qpro: QproReference) -> float:
    """Max over min relative-position norm across agents and the span."""
    norms = np.linalg.norm(qpro.states[:, :, 0:3], axis=2)
    hi, lo = float(norms.max()), float(norms.min())
    if lo <= 1e-15 * max(hi, 1.0):
        return math.inf
    return hi / lo


def select_qpro_window(traj, candidate_rev_counts, radius: float, phases,
                       first_rev: int = 0, cond_cap: float = 1e9,
                       prefer_revs: int = 12,
                       tie_fraction: float = 0.05) -> QproReference:
    """Brute-force window selection: minimize range ratio over candidates.

    Candidates whose ratios tie within ``tie_fraction`` of the minimum are
    broken toward ``prefer_revs`` revolutions (reference switching is
    cheaper with longer windows, geometry is better with shorter ones).
    """
    candidates = list(candidate_rev_counts)
    if not candidates:
        raise RelMotionError("no candidate window lengths supplied")
    built = []
    failures = {}
    for n in candidates:
        try:
            built.append((n, generate_qpro(traj, (first_rev, n), radius, phases,
                                           cond_cap=cond_cap)))
        except RelMotionError as exc:
            failures[n] = str(exc)
    if not built:
        raise RelMotionError(f"all candidate windows rejected: {failures}")
    best_ratio = min(q.range_ratio for _, q in built)
    tied = [(n, q) for n, q in built if q.range_ratio <= best_ratio * (1.0 + tie_fraction)]
    n_sel, q_sel = min(tied, key=lambda nq: (abs(nq[0] - prefer_revs), -nq[0]))
    return q_sel


# -- local toroidal coordinates ----------------------------------------------------


@dataclass
class LtcState:
    """Torus-adapted relative coordinates (alpha, beta, h) and their rates."""

    zeta_r: np.ndarray
    zeta_v: np.ndarray

    @property
    def alpha(self) -> float:
        return float(self.zeta_r[0])

    @property
    def beta(self) -> float:
        return float(self.zeta_r[1])

    @property
    def h(self) -> float:
        return float(self.zeta_r[2])


def _toroidal_basis(mode: CentralMode, traj, t: float):
    phi = traj.stm(mode.t0, float(t)).phi
    w_r = phi @ mode.w_r
    w_i = phi @ mode.w_i
    r_r, v_r = w_r[0:3], w_r[3:6]
    r_i, v_i = w_i[0:3], w_i[3:6]
    n_raw = np.cross(r_r, r_i)
    nn = np.linalg.norm(n_raw)
    if nn < 1e-14:
        raise RelMotionError("singular toroidal basis (r_r parallel to r_i)")
    n_hat = n_raw / nn
    n_dot_raw = np.cross(v_r, r_i) + np.cross(r_r, v_i)
    n_hat_dot = n_dot_raw / nn - n_raw * (n_raw @ n_dot_raw) / nn**3
    t_mat = np.column_stack([r_r, r_i, n_hat])
    t_dot = np.column_stack([v_r, v_i, n_hat_dot])
    return t_mat, t_dot


def ltc_from_relstate(dr, dv, t: float, mode: CentralMode, traj) -> LtcState:
    """Relative position/velocity to local toroidal coordinates."""
    t_mat, t_dot = _toroidal_basis(mode, traj, t)
    zeta_r = np.linalg.solve(t_mat, np.asarray(dr, dtype=float))
    zeta_v = np.linalg.solve(t_mat, np.asarray(dv, dtype=float) - t_dot @ zeta_r)
    return LtcState(zeta_r=zeta_r, zeta_v=zeta_v)


def relstate_from_ltc(ltc: LtcState, t: float, mode: CentralMode, traj):
    """Local toroidal coordinates back to relative position/velocity."""
    t_mat, t_dot = _toroidal_basis(mode, traj, t)
    dr = t_mat @ ltc.zeta_r
    dv = t_dot @ ltc.zeta_r + t_mat @ ltc.zeta_v
    return dr, dv


def eigenvalue_growth(traj, max_revs: int | None = None) -> np.ndarray:
    """log|eigenvalues| of Phi(k revs) for k = 1..max_revs (diagnostic)."""
    n = traj.n_revs if max_revs is None else min(max_revs, traj.n_revs)
    rows = []
    acc = np.eye(6)
    for k in range(n):
        acc = traj.seg_stms[k] @ acc
        lam = np.linalg.eigvals(acc)
        rows.append(np.sort(np.log(np.abs(lam))))
    return np.array(rows)
