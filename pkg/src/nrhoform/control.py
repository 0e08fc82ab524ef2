"""Station-keeping control laws and the passive-safety filter.

Absolute control solves a sequential convex program that targets a
position ellipsoid at the perilune crossing six revolutions downstream.
Relative control is a two-impulse STM targeting law.  The safety filter
minimally modifies the stacked impulses so that pairwise belief-space
keep-out ellipsoids hold across the propulsion-cutoff horizon, including
missed-maneuver branches, which is what makes the absolute and relative
laws safely composable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .constants import SECONDS_PER_DAY
from .dynamics import StmSegment, propagate_with_stm
from .numerics import ConicProblem, IntegratorSpec, SocConstraint, solve_conic
from .orbits import true_anomaly

B_IMPULSE = np.vstack([np.zeros((3, 3)), np.eye(3)])


class ControlError(RuntimeError):
    pass


# -- absolute control --------------------------------------------------------------


@dataclass
class AbsoluteManeuverProblem:
    """Definition of one absolute station-keeping solve.

    ``x0`` is the estimated chief state (normalized) at ``t0``; ``t_f`` is
    the perilune epoch six revolutions downstream.  The ellipsoid radius,
    trust region and convergence thresholds carry their natural units.
    """

    x0: np.ndarray
    t0: float
    t_f: float
    epsilon_km: float = 25.0
    trust_region_cm_s: float = 1.0
    max_iters: int = 60
    slack_penalty: float = 1e4
    tol_dv_cm_s: float = 1e-4
    tol_slack: float = 1e-8

    def __post_init__(self):
        if self.epsilon_km <= 0 or self.trust_region_cm_s <= 0:
            raise ValueError("ellipsoid radius and trust region must be positive")
        if self.t_f <= self.t0:
            raise ValueError("target epoch must follow the maneuver epoch")


def absolute_maneuver(prob: AbsoluteManeuverProblem, traj,
                      spec: IntegratorSpec | None = None):
    """Minimum-norm impulse targeting the downstream perilune ellipsoid.

    Sequential convex programming: propagate the burned state with its
    STM, linearize the final-position constraint in the impulse, solve the
    small second-order-cone subproblem with an l2-penalized dynamics slack
    and a trust region, and repeat until the impulse stops moving and the
    slack vanishes.  Returns (dv_normalized, info).
    """
    system = traj.system
    model = traj.model
    spec = spec or IntegratorSpec(rel_tol=1e-11, abs_tol=1e-11)
    vu_cm_s = system.vu_kms * 1e5
    eps = prob.epsilon_km / system.lu_km
    trust = prob.trust_region_cm_s / vu_cm_s
    ref_pos = traj.state(prob.t_f)[0:3]
    pos = np.hstack([np.eye(3), np.zeros((3, 3))])

    start_offset_km = float(np.linalg.norm(
        (np.asarray(prob.x0[0:3]) - traj.state(prob.t0)[0:3]))) * system.lu_km
    if start_offset_km > 5000.0:
        raise ControlError(
            f"estimate {start_offset_km:.0f} km from reference: outside the "
            "linearization validity of the targeting problem")

    ref_f = traj.state(prob.t_f)

    def propagate(dv):
        x_burn = np.asarray(prob.x0, dtype=float).copy()
        x_burn[3:6] += dv
        xf, seg = propagate_with_stm(x_burn, prob.t0, prob.t_f, model, spec)
        miss = pos @ (xf - ref_f)
        return miss, seg.phi

    def merit(dv, miss):
        # violations inside the convergence band are not penalized, so the
        # iterate can slide along the curved ellipsoid boundary freely
        violation = max(0.0, float(np.linalg.norm(miss)) - eps * (1.0 + 1e-3))
        return float(np.linalg.norm(dv)) + prob.slack_penalty * violation

    try:
        return _scp_loop(prob, propagate, merit, np.zeros(3), eps, trust,
                         vu_cm_s, system)
    except ControlError:
        # Deep-miss recovery: damped Newton onto the exact target position
        # gives a feasible interior point, from which the impulse-minimizing
        # pass is well conditioned.
        dv_feasible = _newton_position_target(propagate, eps)
        return _scp_loop(prob, propagate, merit, dv_feasible, eps, trust,
                         vu_cm_s, system)


def _newton_position_target(propagate, eps, max_iter: int = 30):
    """Damped Newton steps toward zero final-position miss."""
    dv = np.zeros(3)
    miss, phi = propagate(dv)
    best = float(np.linalg.norm(miss))
    for _ in range(max_iter):
        if best <= 0.5 * eps:
            return dv
        gain = phi[0:3, 3:6]
        try:
            step = np.linalg.solve(gain, -miss)
        except np.linalg.LinAlgError as exc:
            raise ControlError("singular targeting sensitivity") from exc
        damping = 1.0
        for _ in range(12):
            cand = dv + damping * step
            miss_c, phi_c = propagate(cand)
            if np.linalg.norm(miss_c) < best:
                dv, miss, phi = cand, miss_c, phi_c
                best = float(np.linalg.norm(miss))
                break
            damping *= 0.5
        else:
            raise ControlError("position targeting stalled")
    raise ControlError("position targeting did not reach the ellipsoid")


def _scp_loop(prob, propagate, merit, dv_start, eps, trust, vu_cm_s, system):
    pos = np.hstack([np.eye(3), np.zeros((3, 3))])
    dv_bar = np.asarray(dv_start, dtype=float).copy()
    miss_bar, phi = propagate(dv_bar)
    merit_bar = merit(dv_bar, miss_bar)
    radius = trust
    history = [merit_bar]
    info = {"iterations": 0, "converged": False, "objective_history": history}
    last_step_cm_s = np.inf
    slack = np.inf
    stall = 0
    for iteration in range(prob.max_iters):
        info["iterations"] = iteration + 1
        # subproblem variables z = (dv 3, nu 6, s_dv, s_nu)
        n = 11
        q = np.zeros(n)
        q[9] = 1.0
        q[10] = prob.slack_penalty
        socs = [
            SocConstraint(np.hstack([np.eye(3), np.zeros((3, 8))]), np.zeros(3),
                          np.eye(n)[9], 0.0),
            SocConstraint(np.hstack([np.zeros((6, 3)), np.eye(6), np.zeros((6, 2))]),
                          np.zeros(6), np.eye(n)[10], 0.0),
        ]
        a_tgt = np.zeros((3, n))
        a_tgt[:, 0:3] = pos @ phi[:, 3:6]
        a_tgt[:, 3:9] = pos @ phi
        b_tgt = miss_bar - (pos @ phi[:, 3:6]) @ dv_bar
        socs.append(SocConstraint(a_tgt, b_tgt, np.zeros(n), eps))
        lb = np.full(n, -np.inf)
        ub = np.full(n, np.inf)
        lb[0:3] = dv_bar - radius
        ub[0:3] = dv_bar + radius
        lb[9:11] = 0.0
        sol = solve_conic(ConicProblem(n=n, q=q, socs=socs, lb=lb, ub=ub))
        if not sol.ok:
            raise ControlError(f"SCP subproblem failed: status {sol.status}")
        dv_new = sol.x[0:3]
        slack = float(np.linalg.norm(sol.x[3:9]))
        miss_new, phi_new = propagate(dv_new)
        merit_new = merit(dv_new, miss_new)
        last_step_cm_s = float(np.max(np.abs(dv_new - dv_bar))) * vu_cm_s
        if (last_step_cm_s < prob.tol_dv_cm_s and slack < prob.tol_slack
                and np.linalg.norm(miss_new) <= eps * (1.0 + 1e-3)
                and merit_new <= merit_bar + 1e-12):
            dv_bar, miss_bar = dv_new, miss_new
            history.append(merit_new)
            info["converged"] = True
            break
        # otherwise accept only steps that reduce the true penalized objective
        feasible = (np.linalg.norm(miss_bar) <= eps * (1.0 + 1e-3)
                    and slack < prob.tol_slack)
        if merit_new < merit_bar - 1e-16:
            improvement_cm_s = (merit_bar - merit_new) * vu_cm_s
            dv_bar, miss_bar, phi = dv_new, miss_new, phi_new
            merit_bar = merit_new
            history.append(merit_bar)
            radius = min(2.0 * radius, trust)
            stall = 0 if improvement_cm_s > prob.tol_dv_cm_s else stall + 1
        else:
            radius *= 0.5
            stall += 1
            if radius < 1e-4 * trust and not feasible:
                break
        if stall >= 6 and feasible:
            # feasible but the boundary crawl has stopped paying: accept
            info["converged"] = True
            info["stagnated"] = True
            break
    if not info["converged"]:
        raise ControlError(
            f"SCP did not converge in {info['iterations']} iterations "
            f"(last step {last_step_cm_s:.2e} cm/s, slack {slack:.2e}, "
            f"miss {np.linalg.norm(miss_bar) * system.lu_km:.1f} km)")

    info["slack"] = slack
    info["final_miss_km"] = float(np.linalg.norm(miss_bar)) * system.lu_km
    return dv_bar, info


# -- relative control --------------------------------------------------------------


def relative_maneuver(dx0, dr_f, stm: StmSegment) -> np.ndarray:
    """Impulse delivering a relative state to a target relative position.

    Solves dr_f = Phi_rx dx0 + Phi_rv dv for dv, where Phi_rx is the
    position-rows block and Phi_rv its velocity columns.
    """
    phi_rx = stm.phi[0:3, :]
    phi_rv = stm.phi[0:3, 3:6]
    if np.linalg.cond(phi_rv) > 1e12:
        raise ControlError("near-singular transfer (Phi_rv not invertible)")
    dx0 = np.asarray(dx0, dtype=float)
    dr_f = np.asarray(dr_f, dtype=float)
    return np.linalg.solve(phi_rv, dr_f - phi_rx @ dx0)


# -- belief propagation ------------------------------------------------------------


@dataclass
class BeliefGaussian:
    """Mean and covariance of a (relative or absolute) state estimate."""

    mean: np.ndarray
    cov: np.ndarray
    epoch: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        asym = np.max(np.abs(self.cov - self.cov.T))
        if asym > 1e-9 * max(1.0, np.max(np.abs(self.cov))):
            raise ValueError("covariance must be symmetric")
        self.cov = 0.5 * (self.cov + self.cov.T)


def _belief_grid(mean0, cov0, dv, g_exe, phis, dts, g_rel):
    """Means/covariances on a time grid given impulse and noise inputs.

    ``phis[i]`` is Phi(t_i, t0); process noise accumulates as the
    STM-composed integral of g_rel g_rel^T.
    """
    m0 = mean0 + B_IMPULSE @ dv
    s0 = cov0.copy()
    if g_exe is not None:
        s0 = s0 + B_IMPULSE @ (g_exe @ g_exe.T) @ B_IMPULSE.T
    means = phis @ m0
    covs = np.einsum("nij,jk,nlk->nil", phis, s0, phis)
    if g_rel is not None and np.any(g_rel):
        gg = g_rel @ g_rel.T
        inv = np.linalg.inv(phis)
        kernel = np.einsum("nij,jk,nlk->nil", inv, gg, inv)
        # trapezoidal accumulation of the projected diffusion
        w = np.zeros_like(kernel)
        for i in range(1, len(dts)):
            w[i] = w[i - 1] + 0.5 * (kernel[i] + kernel[i - 1]) * dts[i]
        covs = covs + np.einsum("nij,njk,nlk->nil", phis, w, phis)
    covs = 0.5 * (covs + np.transpose(covs, (0, 2, 1)))
    return means, covs


def propagate_belief(belief: BeliefGaussian, dv, g_exe, stm_stream, g_rel,
                     t: float) -> BeliefGaussian:
    """Propagate a belief through the relative dynamics to time t.

    ``stm_stream`` is (times, phis) with phis[i] = Phi(times[i], epoch).
    A missed-maneuver variant is simply ``dv=0, g_exe=None``.
    """
    ts, phis = stm_stream
    mask = ts <= t + 1e-12
    if not mask.any() or abs(ts[mask][-1] - t) > 1e-9:
        raise ControlError(f"t={t} is not on the supplied STM stream")
    ts_use = ts[mask]
    dts = np.diff(ts_use, prepend=ts_use[0])
    means, covs = _belief_grid(belief.mean, belief.cov,
                               np.zeros(3) if dv is None else np.asarray(dv, float),
                               g_exe, phis[mask], dts, g_rel)
    cov = covs[-1]
    eigmin = float(np.linalg.eigvalsh(cov).min())
    if eigmin < -1e-9 * max(np.trace(cov), 1e-300):
        raise ControlError("covariance lost positive semidefiniteness")
    return BeliefGaussian(mean=means[-1], cov=cov, epoch=float(t))


# -- safety filter -----------------------------------------------------------------


@dataclass(frozen=True)
class SafetyConfig:
    """Keep-out geometry and horizon settings for the safety filter."""

    d_min_m: float = 100.0
    t_co_min_days: float = 1.0
    t_co_max_days: float = 3.0
    max_iterations: int = 25
    grid_points: int = 500
    sigma_scale: float = 3.0
    subproblem_margin: float = 1e-3

    def __post_init__(self):
        if not 0 < self.t_co_min_days <= self.t_co_max_days:
            raise ValueError("cutoff times must satisfy 0 < min <= max")
        if self.d_min_m <= 0:
            raise ValueError("minimum separation must be positive")


@dataclass
class CbfResult:
    dv_safe: np.ndarray
    activated: bool
    iterations: int
    constraint_times: list = field(default_factory=list)
    worst_margin: float = np.inf


def cutoff_horizon_epochs(t0: float, control_epochs, cfg: SafetyConfig, system):
    """(t1, t2): first control epochs past one and two max cutoffs."""
    t_co = cfg.t_co_max_days * SECONDS_PER_DAY / system.tu_s
    later = np.asarray([t for t in control_epochs if t > t0 + 1e-12])
    after1 = later[later >= t0 + t_co - 1e-9]
    after2 = later[later >= t0 + 2.0 * t_co - 1e-9]
    if len(after1) == 0 or len(after2) == 0:
        raise ControlError("control schedule does not cover the safety horizon")
    return float(after1[0]), float(after2[0])


def _pair_lhs(mu_a, cov_a, mu_b, cov_b, d2, scale):
    """Keep-out constraint left-hand side on a grid for one pair."""
    d = mu_a[:, 0:3] - mu_b[:, 0:3]
    s = scale * (cov_a[:, 0:3, 0:3] + cov_b[:, 0:3, 0:3])
    s[:, range(3), range(3)] += d2
    sol = np.linalg.solve(s, d[..., None])[..., 0]
    return np.einsum("ni,ni->n", d, sol), sol, s


def cbf_sip_filter(beliefs, dv_desired, stream, control_epochs,
                   cfg: SafetyConfig, system, g_exe_fn=None, g_rel=None) -> CbfResult:
    """Filter desired impulses so pairwise keep-out ellipsoids hold.

    ``beliefs`` are the agents' relative beliefs at the control epoch t0;
    ``stream`` is (times, phis) spanning [t0, t2] with phis relative to t0.
    Safe inputs pass through untouched without any solver call; otherwise
    locally-worst violation times accumulate into a constraint set, each
    ellipsoid constraint is linearized in the impulses, and a small conic
    program minimally shifts the impulses until dense-grid checks pass.
    """
    m_agents = len(beliefs)
    dv_desired = np.asarray(dv_desired, dtype=float).reshape(m_agents, 3)
    ts, phis = stream
    t0 = beliefs[0].epoch
    t1, t2 = cutoff_horizon_epochs(t0, control_epochs, cfg, system)
    keep2 = ts <= t2 + 1e-12
    ts = ts[keep2]
    phis = phis[keep2]
    mask1 = ts <= t1 + 1e-12
    dts = np.diff(ts, prepend=ts[0])
    d_min = cfg.d_min_m / 1e3 / system.lu_km
    d2 = d_min**2

    def propagate_all(dvs):
        nom_mu, nom_cov, mis_mu, mis_cov = [], [], [], []
        for k in range(m_agents):
            g_exe = g_exe_fn(dvs[k]) if g_exe_fn is not None else None
            mu, cov = _belief_grid(beliefs[k].mean, beliefs[k].cov, dvs[k],
                                   g_exe, phis, dts, g_rel)
            nom_mu.append(mu)
            nom_cov.append(cov)
            mu_m, cov_m = _belief_grid(beliefs[k].mean, beliefs[k].cov,
                                       np.zeros(3), None, phis, dts, g_rel)
            mis_mu.append(mu_m)
            mis_cov.append(cov_m)
        return (np.array(nom_mu), np.array(nom_cov),
                np.array(mis_mu), np.array(mis_cov))

    def violations(nom_mu, nom_cov, mis_mu, mis_cov):
        found = []
        worst = np.inf
        for k in range(m_agents):
            for j in range(m_agents):
                if k == j:
                    continue
                if k < j:
                    lhs, _, _ = _pair_lhs(nom_mu[k], nom_cov[k], nom_mu[j],
                                          nom_cov[j], d2, cfg.sigma_scale)
                    worst = min(worst, float(lhs.min()))
                    found += _local_minima_below(lhs, 1.0, ("nom", k, j))
                lhs2, _, _ = _pair_lhs(nom_mu[k], nom_cov[k], mis_mu[j],
                                       mis_cov[j], d2, cfg.sigma_scale)
                lhs2 = np.where(mask1, lhs2, np.inf)
                worst = min(worst, float(lhs2[mask1].min()))
                found += _local_minima_below(lhs2, 1.0, ("mis", k, j))
        return found, worst

    dv_safe = dv_desired.copy()
    constraint_set: dict = {}
    iterations = 0
    worst = np.inf
    while True:
        nom_mu, nom_cov, mis_mu, mis_cov = propagate_all(dv_safe)
        found, worst = violations(nom_mu, nom_cov, mis_mu, mis_cov)
        if not found:
            return CbfResult(dv_safe=dv_safe, activated=iterations > 0,
                             iterations=iterations,
                             constraint_times=sorted(
                                 {ts[i] for (_, _, _, i) in constraint_set}),
                             worst_margin=worst)
        if iterations >= cfg.max_iterations:
            raise ControlError(
                f"safety filter exceeded {cfg.max_iterations} iterations "
                f"(worst constraint value {worst:.4f})")
        for kind, k, j, i in found:
            constraint_set[(kind, k, j, i)] = True

        # linearize every accumulated constraint about the current impulses
        n = 3 * m_agents + m_agents
        q = np.zeros(n)
        q[3 * m_agents:] = 1.0
        socs = []
        for k in range(m_agents):
            a = np.zeros((3, n))
            a[:, 3 * k:3 * k + 3] = np.eye(3)
            c = np.zeros(n)
            c[3 * m_agents + k] = 1.0
            socs.append(SocConstraint(a, -dv_desired[k], c, 0.0))
        rows = []
        rhs = []
        for kind, k, j, i in constraint_set:
            mu_b = nom_mu[j] if kind == "nom" else mis_mu[j]
            cov_b = nom_cov[j] if kind == "nom" else mis_cov[j]
            lhs_i, sol_i, s_i = _pair_lhs(nom_mu[k][i:i + 1], nom_cov[k][i:i + 1],
                                          mu_b[i:i + 1], cov_b[i:i + 1], d2,
                                          cfg.sigma_scale)
            # Linearize the equivalent Mahalanobis-distance form
            # sqrt(d' S^-1 d) >= 1: its gradient stays O(1) even at deep
            # violations, so corrections land on the keep-out boundary
            # instead of overshooting.
            dist = math.sqrt(max(float(lhs_i[0]), 0.0))
            if dist > 1e-8:
                grad_d = sol_i[0] / dist
            else:
                # coincident means: push apart along the relative velocity
                dvel = (nom_mu[k][i, 3:6] - mu_b[i, 3:6])
                u = dvel / max(np.linalg.norm(dvel), 1e-300)
                sol_u = np.linalg.solve(s_i[0], u)
                grad_d = sol_u / math.sqrt(max(float(u @ sol_u), 1e-300))
            grad_k = grad_d @ (phis[i][0:3, 3:6])
            row = np.zeros(n)
            row[3 * k:3 * k + 3] = -grad_k
            if kind == "nom":
                row[3 * j:3 * j + 3] = grad_k
            const = (dist - grad_k @ dv_safe[k]
                     + (grad_k @ dv_safe[j] if kind == "nom" else 0.0))
            # linearized distance >= 1 + margin -> row @ z <= const - 1 - margin
            rows.append(row)
            rhs.append(const - 1.0 - cfg.subproblem_margin)
        sol = solve_conic(ConicProblem(n=n, q=q, socs=socs,
                                       a_in=np.array(rows), b_in=np.array(rhs)))
        if not sol.ok:
            raise ControlError(f"safety subproblem failed: status {sol.status}")
        dv_safe = sol.x[:3 * m_agents].reshape(m_agents, 3)
        iterations += 1


def _local_minima_below(lhs, threshold, tag):
    out = []
    n = len(lhs)
    for i in range(n):
        if not np.isfinite(lhs[i]) or lhs[i] >= threshold:
            continue
        left = lhs[i - 1] if i > 0 else np.inf
        right = lhs[i + 1] if i < n - 1 else np.inf
        if lhs[i] <= left and lhs[i] <= right:
            out.append((*tag, i))
    return out


def check_keepout(beliefs, dvs, stream, t1, cfg: SafetyConfig, system,
                  g_exe_fn=None, g_rel=None):
    """Dense-grid evaluation of both constraint families (for verification).

    Returns the minimum LHS over nominal pairs on the full stream span and
    nominal-vs-missed pairs up to t1.
    """
    m_agents = len(beliefs)
    ts, phis = stream
    dts = np.diff(ts, prepend=ts[0])
    mask1 = ts <= t1 + 1e-12
    d2 = (cfg.d_min_m / 1e3 / system.lu_km) ** 2
    nom = []
    mis = []
    for k in range(m_agents):
        g_exe = g_exe_fn(dvs[k]) if g_exe_fn is not None else None
        nom.append(_belief_grid(beliefs[k].mean, beliefs[k].cov, dvs[k], g_exe,
                                phis, dts, g_rel))
        mis.append(_belief_grid(beliefs[k].mean, beliefs[k].cov, np.zeros(3),
                                None, phis, dts, g_rel))
    worst = np.inf
    for k in range(m_agents):
        for j in range(m_agents):
            if k == j:
                continue
            if k < j:
                lhs, _, _ = _pair_lhs(nom[k][0], nom[k][1], nom[j][0], nom[j][1],
                                      d2, cfg.sigma_scale)
                worst = min(worst, float(lhs.min()))
            lhs2, _, _ = _pair_lhs(nom[k][0], nom[k][1], mis[j][0], mis[j][1],
                                   d2, cfg.sigma_scale)
            worst = min(worst, float(lhs2[mask1].min()))
    return worst


# -- maneuver scheduling -----------------------------------------------------------


@dataclass
class RevolutionSchedule:
    """Control epochs for one revolution's apolune window."""

    apolune_epoch: float
    absolute_epoch: float
    relative_epochs: np.ndarray

    @property
    def all_epochs(self) -> np.ndarray:
        return np.concatenate([[self.absolute_epoch], self.relative_epochs])


def schedule_maneuvers(traj, n_rel_per_rev: int = 3,
                       absolute_anomaly_deg: float = 160.0,
                       last_anomaly_deg: float = 200.0) -> list:
    """Place maneuvers in the low-sensitivity window around each apolune.

    One absolute maneuver at the window-opening anomaly, then relative
    maneuvers uniformly spaced in anomaly up to and including the closing
    anomaly.  Apolunes whose window would leave the reference span are
    skipped.
    """
    from scipy.optimize import brentq
    if n_rel_per_rev < 1:
        raise ControlError("need at least one relative maneuver per revolution")
    lo, hi = traj.span
    period = float(np.mean(np.diff(traj.patch_times)))
    half = 0.45 * period  # stay clear of the perilune anomaly wrap
    out = []
    for tau in traj.apolune_epochs:
        if tau - half < lo or tau + half > hi:
            continue

        def anomaly_err(t, target):
            a = true_anomaly(traj, t)
            return ((a - target + 180.0) % 360.0) - 180.0

        try:
            t_abs = brentq(anomaly_err, tau - half, tau,
                           args=(absolute_anomaly_deg,), xtol=1e-10)
            step = (last_anomaly_deg - absolute_anomaly_deg) / n_rel_per_rev
            rel = []
            for i in range(1, n_rel_per_rev + 1):
                target = absolute_anomaly_deg + i * step
                if target <= 180.0:
                    t_i = brentq(anomaly_err, tau - half, tau,
                                 args=(target,), xtol=1e-10)
                else:
                    t_i = brentq(anomaly_err, tau, tau + half,
                                 args=(target,), xtol=1e-10)
                rel.append(t_i)
        except ValueError as exc:
            raise ControlError(f"anomaly root finding failed near t={tau}") from exc
        out.append(RevolutionSchedule(apolune_epoch=float(tau),
                                      absolute_epoch=float(t_abs),
                                      relative_epochs=np.array(rel)))
    return out


def flatten_control_epochs(schedules) -> np.ndarray:
    return np.sort(np.concatenate([s.all_epochs for s in schedules]))


# -- virtual chief -----------------------------------------------------------------


def virtual_chief(estimates, references, index_set):
    """Formation-mean chief state and per-agent relative estimates.

    The chief is the mean of reference-subtracted estimates over the index
    set (agents whose last maneuver was available); relative estimates are
    taken against it for every agent.
    """
    estimates = np.asarray(estimates, dtype=float)
    references = np.asarray(references, dtype=float)
    idx = sorted(index_set)
    if not idx:
        raise ControlError("virtual chief needs a non-empty index set")
    chief = np.mean(estimates[idx] - references[idx], axis=0)
    return chief, estimates - chief


# -- maneuver bookkeeping ----------------------------------------------------------


@dataclass
class ManeuverRecord:
    agent: int
    epoch_s: float
    kind: str  # absolute | relative | combined
    dv_commanded_mps: np.ndarray
    dv_filtered_mps: np.ndarray
    dv_executed_mps: np.ndarray
    filtered: bool
    executed: bool


@dataclass
class ManeuverPlan:
    records: list = field(default_factory=list)

    def append(self, rec: ManeuverRecord):
        self.records.append(rec)

    def total_dv_mps(self, agent: int | None = None, executed_only=True) -> float:
        tot = 0.0
        for r in self.records:
            if agent is not None and r.agent != agent:
                continue
            dv = r.dv_executed_mps if executed_only else r.dv_filtered_mps
            tot += float(np.linalg.norm(dv))
        return tot

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["agent", "epoch_s", "kind", "dvx_ms", "dvy_ms",
                             "dvz_ms", "filtered", "executed"])
            for r in self.records:
                writer.writerow([r.agent, repr(float(r.epoch_s)), r.kind]
                                + [repr(float(v)) for v in r.dv_filtered_mps]
                                + [int(r.filtered), int(r.executed)])

    @classmethod
    def from_csv(cls, path):
        plan = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                dv = np.array([float(row["dvx_ms"]), float(row["dvy_ms"]),
                               float(row["dvz_ms"])])
                plan.append(ManeuverRecord(
                    agent=int(row["agent"]), epoch_s=float(row["epoch_s"]),
                    kind=row["kind"], dv_commanded_mps=dv.copy(),
                    dv_filtered_mps=dv.copy(), dv_executed_mps=dv.copy(),
                    filtered=bool(int(row["filtered"])),
                    executed=bool(int(row["executed"]))))
        return plan
