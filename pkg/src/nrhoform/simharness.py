"""Ground-truth simulation of formation station-keeping campaigns.

Each trial walks the control schedule: propagate truth and the navigation
filter through the measurement timeline, form the virtual chief, compute
the absolute maneuver at absolute epochs and relative maneuvers at every
control epoch, pass the stacked impulses through the safety filter, then
apply the execution-error, impulse-bit and propulsion-outage models to
what actually gets burned.  Trials are reproducible: every random draw
comes from a counter-based stream keyed by (seed, trial, agent, purpose).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .constants import DEFAULT_SYSTEM, SECONDS_PER_DAY, SECONDS_PER_YEAR
from .control import (
    AbsoluteManeuverProblem,
    BeliefGaussian,
    ManeuverPlan,
    ManeuverRecord,
    SafetyConfig,
    absolute_maneuver,
    cbf_sip_filter,
    cutoff_horizon_epochs,
    flatten_control_epochs,
    relative_maneuver,
    schedule_maneuvers,
    virtual_chief,
)
from .dynamics import HfemModel, HfemParams, propagate_state
from .ephemeris import CircularProvider, KeplerianProvider, load_table
from .navigation import (
    Architecture,
    FilterState,
    apply_impulse,
    ground_station_state,
    measurement_value,
    predict,
    schedule_measurements,
    update,
)
from .numerics import IntegratorSpec
from .orbits import find_nrho_9_2, stack_and_converge
from .relmotion import generate_qpro
from .simconfig import ScenarioConfig


class SimulationError(RuntimeError):
    pass


# -- error models ------------------------------------------------------------------


@dataclass(frozen=True)
class GatesParams:
    """Impulsive execution-error model: fixed/proportional magnitude and
    pointing components (1-sigma, physical units)."""

    fixed_magnitude_mms: float
    proportional_magnitude_frac: float
    fixed_pointing_mms: float
    proportional_pointing_rad: float

    @classmethod
    def from_noise(cls, noise):
        return cls(noise.fixed_magnitude_mms, noise.proportional_magnitude_frac,
                   noise.fixed_pointing_mms, noise.proportional_pointing_rad)


def gates_covariance_sqrt(dv_mps, p: GatesParams) -> np.ndarray:
    """Covariance square root of the execution error, m/s, frame of dv.

    Magnitude error acts along the burn direction, pointing errors in the
    two transverse directions; both have fixed plus proportional parts.
    """
    dv_mps = np.asarray(dv_mps, dtype=float)
    mag = float(np.linalg.norm(dv_mps))
    fix_m = p.fixed_magnitude_mms * 1e-3
    fix_p = p.fixed_pointing_mms * 1e-3
    sig_m = math.sqrt(fix_m**2 + (p.proportional_magnitude_frac * mag) ** 2)
    sig_p = math.sqrt(fix_p**2 + (p.proportional_pointing_rad * mag) ** 2)
    if mag < 1e-15:
        return np.diag([fix_m, fix_p, fix_p])
    u = dv_mps / mag
    ref = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(u, ref)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(u, t1)
    basis = np.column_stack([u, t1, t2])
    return basis @ np.diag([sig_m, sig_p, sig_p])


def gates_error(dv_mps, p: GatesParams, rng):
    """Sampled executed impulse and the covariance square root used."""
    g = gates_covariance_sqrt(dv_mps, p)
    executed = np.asarray(dv_mps, dtype=float) + g @ rng.standard_normal(3)
    return executed, g


def sample_mme(rate: float, t_co_min_days: float, t_co_max_days: float, rng):
    """Optional propulsion-cutoff duration (days); None when no event."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    if rng.random() >= rate:
        return None
    return float(rng.uniform(t_co_min_days, t_co_max_days))


def rng_stream(seed: int, *keys) -> np.random.Generator:
    """Independent reproducible stream keyed by (seed, *keys)."""
    tag = "/".join(str(k) for k in (seed, *keys))
    digest = hashlib.sha256(tag.encode()).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


# -- campaign assets ---------------------------------------------------------------


@dataclass
class CampaignAssets:
    """Deterministic per-campaign objects shared by all trials."""

    cfg: ScenarioConfig
    system: object
    provider: object
    orbit: object
    traj: object
    nominal_model: HfemModel
    schedules: list            # windows inside the scenario span
    control_epochs: np.ndarray  # all epochs over the reference span
    scenario_epochs: np.ndarray
    t_end: float
    qpros: list
    meas_by_epoch: dict
    meas_epochs: np.ndarray
    architecture: Architecture

    def qpro_at(self, t: float):
        for q in self.qpros:
            if q.t0 - 1e-9 <= t <= q.t1 + 1e-9:
                return q
        raise SimulationError(f"no QPRO window covers t={t}")

    def reference_target(self, agent: int, t: float) -> np.ndarray:
        return self.qpro_at(t).state(agent, t)


def make_provider(cfg: ScenarioConfig, system):
    if cfg.provider == "circular":
        return CircularProvider(system)
    if cfg.provider == "kepler":
        return KeplerianProvider(system, ecc=cfg.moon_eccentricity)
    if cfg.provider.startswith("table:"):
        return load_table(cfg.provider.split(":", 1)[1])
    raise SimulationError(f"unknown provider {cfg.provider!r}")


def build_campaign_assets(cfg: ScenarioConfig, system=DEFAULT_SYSTEM,
                          orbit=None, traj=None) -> CampaignAssets:
    """Generate (or accept prebuilt) reference objects for a campaign."""
    provider = make_provider(cfg, system)
    params = HfemParams(srp=cfg.noise.srp_accel_mms2 > 0,
                        srp_accel_mm_s2=cfg.noise.srp_accel_mms2,
                        reflectivity=1.0)
    if orbit is None:
        orbit = find_nrho_9_2(system)
    n_ref = cfg.n_revs + cfg.reference_margin_revs
    spec = IntegratorSpec(rel_tol=cfg.reference_tol, abs_tol=cfg.reference_tol)
    if traj is None:
        model = HfemModel(params, provider, system,
                          cache_span=(-0.5, (n_ref + 1) * orbit.period + 0.5))
        traj = stack_and_converge(orbit, n_ref, cfg.epoch0_s, model, spec=spec)
    else:
        model = traj.model

    schedules_all = schedule_maneuvers(traj, cfg.n_rel_per_rev)
    control_epochs = flatten_control_epochs(schedules_all)
    t_end = float(traj.patch_times[0] + cfg.n_revs * orbit.period)
    schedules = [s for s in schedules_all if s.relative_epochs[-1] < t_end]
    if not schedules:
        raise SimulationError("scenario too short to contain a maneuver window")
    scenario_epochs = flatten_control_epochs(schedules)

    if traj._stream is None:
        extra = np.concatenate([control_epochs, traj.perilune_epochs])
        traj.build_stm_stream(grid_per_rev=cfg.grid_per_rev, extra_times=extra,
                              spec=spec)

    phases = (np.radians(np.asarray(cfg.phases_deg, dtype=float))
              if cfg.phases_deg is not None
              else 2.0 * np.pi * np.arange(cfg.n_agents) / cfg.n_agents)
    radius = cfg.separation_km / system.lu_km / 2.0
    qpros = []
    rev = 0
    while rev * orbit.period + traj.patch_times[0] < t_end:
        span = min(cfg.qpro_window_revs, traj.n_revs - rev)
        qpros.append(generate_qpro(traj, (rev, span), radius, phases))
        rev += span

    architecture = Architecture(tag=cfg.architecture,
                                hub=cfg.hub if cfg.architecture != "fully_connected"
                                else None)
    specs = schedule_measurements(schedules, architecture, cfg.n_agents, system,
                                  cfg.nav, span=(traj.patch_times[0], t_end))
    meas_by_epoch: dict = {}
    for s in specs:
        meas_by_epoch.setdefault(round(s.epoch, 12), []).append(s)
    meas_epochs = np.array(sorted(meas_by_epoch))
    return CampaignAssets(cfg=cfg, system=system, provider=provider, orbit=orbit,
                          traj=traj, nominal_model=model, schedules=schedules,
                          control_epochs=control_epochs,
                          scenario_epochs=scenario_epochs, t_end=t_end,
                          qpros=qpros, meas_by_epoch=meas_by_epoch,
                          meas_epochs=meas_epochs, architecture=architecture)


# -- telemetry ---------------------------------------------------------------------


@dataclass
class TrialTelemetry:
    trial: int
    state_rows: list = field(default_factory=list)   # (t_s, agent, truth6, est6, ref6)
    maneuvers: ManeuverPlan = field(default_factory=ManeuverPlan)
    mme_windows: list = field(default_factory=list)  # (agent, t0_s, t1_s)
    cbf_rows: list = field(default_factory=list)     # (t_s, activated, iterations)
    nav_rows: list = field(default_factory=list)     # pre-maneuver error magnitudes
    computed_abs_dv_cms: float = 0.0
    sep_min_km: float = math.inf
    sep_max_km: float = 0.0
    timings: dict = field(default_factory=dict)
    span_s: float = 0.0

    def executed_dv_cms(self, agent: int) -> float:
        return self.maneuvers.total_dv_mps(agent) * 100.0

    def to_csv(self, path):
        """Single long-format telemetry file, SI units, synodic frame."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([
                "t_s", "kind", "agent",
                "truth_rx_m", "truth_ry_m", "truth_rz_m",
                "truth_vx_ms", "truth_vy_ms", "truth_vz_ms",
                "est_rx_m", "est_ry_m", "est_rz_m",
                "est_vx_ms", "est_vy_ms", "est_vz_ms",
                "ref_rx_m", "ref_ry_m", "ref_rz_m",
                "ref_vx_ms", "ref_vy_ms", "ref_vz_ms",
                "aux1", "aux2"])
            for (t_s, agent, truth, est, ref) in self.state_rows:
                writer.writerow([repr(t_s), "state", agent]
                                + [repr(v) for v in truth]
                                + [repr(v) for v in est]
                                + [repr(v) for v in ref] + ["", ""])
            for r in self.maneuvers.records:
                writer.writerow([repr(r.epoch_s), f"maneuver_{r.kind}", r.agent]
                                + [repr(v) for v in r.dv_commanded_mps]
                                + [repr(v) for v in r.dv_filtered_mps]
                                + [repr(v) for v in r.dv_executed_mps]
                                + [""] * 9
                                + [int(r.filtered), int(r.executed)])
            for (agent, t0_s, t1_s) in self.mme_windows:
                writer.writerow([repr(t0_s), "mme", agent] + [""] * 18
                                + [repr(t1_s), ""])
            for (t_s, activated, iters) in self.cbf_rows:
                writer.writerow([repr(t_s), "cbf", ""] + [""] * 18
                                + [int(activated), iters])


# -- the trial loop ----------------------------------------------------------------


def _initial_filter_state(truths, cfg: ScenarioConfig, system, t0, rng):
    """Correlated initial beliefs: a shared absolute error plus small
    per-agent components so pairwise relative errors match their spec."""
    m = cfg.n_agents
    nav = cfg.nav
    sig_abs_r = nav.initial_abs_pos_3sigma_km / 3.0 / system.lu_km
    sig_abs_v = nav.initial_abs_vel_3sigma_cms / 3.0 * 1e-5 / system.vu_kms
    sig_rel_r = nav.initial_rel_pos_3sigma_m / 3.0 / 1e3 / system.lu_km / math.sqrt(2)
    sig_rel_v = (nav.initial_rel_vel_3sigma_mms / 3.0 * 1e-6 / system.vu_kms
                 / math.sqrt(2))
    d_abs = np.array([sig_abs_r] * 3 + [sig_abs_v] * 3)
    d_rel = np.array([sig_rel_r] * 3 + [sig_rel_v] * 3)
    common = d_abs * rng.standard_normal(6)
    mean = np.zeros(6 * m)
    for k in range(m):
        mean[6 * k:6 * k + 6] = truths[k] + common + d_rel * rng.standard_normal(6)
    cov = np.kron(np.ones((m, m)), np.diag(d_abs**2))
    cov += np.kron(np.eye(m), np.diag(d_rel**2))
    return FilterState(mean=mean, cov=cov, epoch=float(t0))


def run_trial(assets: CampaignAssets, trial: int) -> TrialTelemetry:
    """One closed-loop station-keeping trial."""
    cfg = assets.cfg
    system = assets.system
    traj = assets.traj
    vu_mps = system.vu_kms * 1e3
    gates = GatesParams.from_noise(cfg.noise)
    safety = SafetyConfig(d_min_m=cfg.noise.d_min_m,
                          t_co_min_days=cfg.noise.t_co_min_days,
                          t_co_max_days=cfg.noise.t_co_max_days)
    truth_spec = IntegratorSpec(rel_tol=cfg.truth_tol, abs_tol=cfg.truth_tol)
    nav_spec = IntegratorSpec(rel_tol=cfg.nav_tol, abs_tol=cfg.nav_tol)
    scp_spec = IntegratorSpec(rel_tol=cfg.scp_tol, abs_tol=cfg.scp_tol)
    sigma_proc = cfg.process_noise_accel_mms2 * 1e-6 / system.lu_km * system.tu_s**2
    sigma_common = cfg.common_process_noise_mms2 * 1e-6 / system.lu_km * system.tu_s**2
    g_rel_accel = cfg.rel_accel_mms2 * 1e-6 / system.lu_km * system.tu_s**2
    g_rel = np.zeros((6, 6))
    g_rel[3:6, 3:6] = np.eye(3) * g_rel_accel

    def g_exe_fn(dv_norm):
        g = gates_covariance_sqrt(np.asarray(dv_norm) * vu_mps, gates)
        return g / vu_mps

    rng_refl = rng_stream(cfg.seed, trial, "reflectivity")
    rng_init = rng_stream(cfg.seed, trial, "init_nav")
    rng_meas = rng_stream(cfg.seed, trial, "measurements")
    rng_gates = [rng_stream(cfg.seed, trial, k, "gates") for k in range(cfg.n_agents)]
    rng_mme = [rng_stream(cfg.seed, trial, k, "mme") for k in range(cfg.n_agents)]

    t0 = float(traj.patch_times[0])
    band = cfg.noise.srp_dispersion_frac
    reflectivities = 1.0 + band * rng_refl.uniform(-1.0, 1.0, size=cfg.n_agents)
    truth_models = [assets.nominal_model.with_reflectivity(float(c))
                    for c in reflectivities]

    truths = np.array([traj.state(t0) + assets.reference_target(k, t0)
                       for k in range(cfg.n_agents)])
    fs = _initial_filter_state(truths, cfg, system, t0, rng_init)

    def ground_fn(t):
        return ground_station_state(assets.provider, t, system,
                                    origin=traj.model.frame_origin)

    telemetry = TrialTelemetry(trial=trial)
    telemetry.span_s = (assets.t_end - t0) * system.tu_s
    cutoff_until = np.full(cfg.n_agents, -np.inf)
    available_last = np.ones(cfg.n_agents, dtype=bool)
    timings = {"absolute_s": [], "relative_s": [], "cbf_s": []}

    def track_separations():
        seps = [np.linalg.norm(truths[i, 0:3] - truths[j, 0:3]) * system.lu_km
                for i in range(cfg.n_agents) for j in range(i + 1, cfg.n_agents)]
        telemetry.sep_min_km = min(telemetry.sep_min_km, min(seps))
        telemetry.sep_max_km = max(telemetry.sep_max_km, max(seps))

    def record_states(t):
        t_s = t * system.tu_s
        phi_ref = traj.state(t)
        for k in range(cfg.n_agents):
            ref = phi_ref + assets.reference_target(k, t)
            telemetry.state_rows.append((
                t_s, k,
                _to_si(truths[k], system), _to_si(fs.agent_mean(k), system),
                _to_si(ref, system)))
        track_separations()

    # merged event timeline over the scenario span
    events = []
    for te in assets.meas_epochs:
        events.append((float(te), "meas"))
    for tc in assets.scenario_epochs:
        events.append((float(tc), "control"))
    events.append((assets.t_end, "end"))
    events.sort(key=lambda e: (e[0], e[1] == "control"))

    abs_epochs = {round(s.absolute_epoch, 12) for s in assets.schedules}
    t_now = t0
    record_states(t_now)
    for (t_ev, kind) in events:
        if t_ev < t0 - 1e-12:
            continue
        if t_ev > t_now + 1e-12:
            for k in range(cfg.n_agents):
                truths[k] = propagate_state(truths[k], t_now, t_ev,
                                            truth_models[k], truth_spec).y_end
            t_now = t_ev
        if kind == "meas":
            fs = predict(fs, t_ev, assets.nominal_model, sigma_proc, nav_spec,
                         common_accel_sigma=sigma_common)
            specs = assets.meas_by_epoch[round(t_ev, 12)]
            values = []
            for s in specs:
                rx = truths[s.receiver]
                tx = ground_fn(t_ev) if s.transmitter is None else truths[s.transmitter]
                sig = (s.sigma / 1e3 / system.vu_kms if s.kind.endswith("rate")
                       else s.sigma / 1e3 / system.lu_km)
                values.append(measurement_value(s.kind, rx, tx)
                              + sig * rng_meas.standard_normal())
            fs, _ = update(fs, specs, values, system, ground_fn)
            track_separations()
        elif kind == "control":
            fs = predict(fs, t_ev, assets.nominal_model, sigma_proc, nav_spec,
                         common_accel_sigma=sigma_common)
            _record_nav_errors(telemetry, t_ev, fs, truths, system)
            _control_step(t_ev, round(t_ev, 12) in abs_epochs,
                          assets, cfg, system, traj, fs, truths,
                          cutoff_until, available_last, telemetry, timings,
                          safety, gates, g_exe_fn, g_rel, rng_gates, rng_mme,
                          scp_spec, vu_mps)
            record_states(t_ev)
        else:
            fs = predict(fs, t_ev, assets.nominal_model, sigma_proc, nav_spec,
                         common_accel_sigma=sigma_common)
            record_states(t_ev)

    telemetry.timings = {k: (float(np.mean(v)) if v else 0.0,
                             float(np.std(v)) if v else 0.0)
                         for k, v in timings.items()}
    return telemetry


def _record_nav_errors(telemetry, t, fs, truths, system):
    """Pre-maneuver navigation errors: absolute per agent, pairwise relative."""
    m = truths.shape[0]
    t_s = t * system.tu_s
    for k in range(m):
        err = fs.agent_mean(k) - truths[k]
        abs_pos_m = float(np.linalg.norm(err[0:3])) * system.lu_km * 1e3
        abs_vel_mms = float(np.linalg.norm(err[3:6])) * system.vu_kms * 1e6
        rel_pos = []
        rel_vel = []
        for j in range(m):
            if j == k:
                continue
            rel_err = (fs.agent_mean(k) - fs.agent_mean(j)) - (truths[k] - truths[j])
            rel_pos.append(np.linalg.norm(rel_err[0:3]) * system.lu_km * 1e3)
            rel_vel.append(np.linalg.norm(rel_err[3:6]) * system.vu_kms * 1e6)
        telemetry.nav_rows.append((t_s, k, abs_pos_m, abs_vel_mms,
                                   float(np.mean(rel_pos)), float(np.mean(rel_vel))))


def _control_step(t_c, is_absolute, assets, cfg, system, traj, fs, truths,
                  cutoff_until, available_last, telemetry, timings, safety,
                  gates, g_exe_fn, g_rel, rng_gates, rng_mme, scp_spec, vu_mps):
    m = cfg.n_agents
    index_set = [k for k in range(m) if available_last[k]] or list(range(m))
    refs = np.array([assets.reference_target(k, t_c) + traj.state(t_c)
                     for k in range(m)])
    estimates = np.array([fs.agent_mean(k) for k in range(m)])
    rel_refs = refs - traj.state(t_c)
    chief, rel_est = virtual_chief(estimates, rel_refs, index_set)

    dv_abs = np.zeros(3)
    if is_absolute:
        peris = traj.perilune_epochs[traj.perilune_epochs > t_c]
        t_f = float(peris[cfg.target_revs_downstream - 1])
        tic = time.perf_counter()
        dv_abs, _ = absolute_maneuver(
            AbsoluteManeuverProblem(x0=chief, t0=t_c, t_f=t_f,
                                    epsilon_km=cfg.epsilon_km,
                                    trust_region_cm_s=cfg.trust_region_cm_s),
            traj, spec=scp_spec)
        timings["absolute_s"].append(time.perf_counter() - tic)
        dv_abs_cms = np.linalg.norm(dv_abs) * vu_mps * 100.0
        if dv_abs_cms < cfg.abs_dv_floor_cms:
            dv_abs = np.zeros(3)
        else:
            telemetry.computed_abs_dv_cms += dv_abs_cms

    later = assets.control_epochs[assets.control_epochs > t_c + 1e-12]
    t_next = float(later[0])
    dv_tot = np.zeros((m, 3))
    tic = time.perf_counter()
    stm_next = traj.stm(t_c, t_next)
    for k in range(m):
        target = assets.reference_target(k, t_next)[0:3]
        dv_rel = relative_maneuver(rel_est[k], target, stm_next)
        dv_tot[k] = dv_abs + dv_rel
    timings["relative_s"].append((time.perf_counter() - tic) / m)

    # safety filter over the cutoff horizon
    t1, t2 = cutoff_horizon_epochs(t_c, assets.control_epochs, safety, system)
    stream = traj.stream_between(t_c, t2)
    weights = np.zeros(m)
    weights[index_set] = 1.0 / len(index_set)
    beliefs = [BeliefGaussian(rel_est[k], fs.relative_cov(k, weights), t_c)
               for k in range(m)]
    tic = time.perf_counter()
    res = cbf_sip_filter(beliefs, dv_tot, stream, assets.control_epochs, safety,
                         system, g_exe_fn=g_exe_fn, g_rel=g_rel)
    timings["cbf_s"].append(time.perf_counter() - tic)
    telemetry.cbf_rows.append((t_c * system.tu_s, res.activated, res.iterations))
    dv_safe = res.dv_safe

    bit_norm = cfg.noise.min_impulse_bit_mms * 1e-3 / vu_mps
    for k in range(m):
        commanded = dv_safe[k].copy()
        if np.linalg.norm(commanded) < bit_norm:
            commanded = np.zeros(3)
        executed = commanded.copy()
        g_exe = None
        if np.any(commanded):
            executed_mps, g_mps = gates_error(commanded * vu_mps, gates, rng_gates[k])
            executed = executed_mps / vu_mps
            g_exe = g_mps / vu_mps
        if t_c >= cutoff_until[k]:
            dur = sample_mme(cfg.noise.mme_rate, cfg.noise.t_co_min_days,
                             cfg.noise.t_co_max_days, rng_mme[k])
            if dur is not None:
                cutoff_until[k] = t_c + dur * SECONDS_PER_DAY / system.tu_s
                telemetry.mme_windows.append(
                    (k, t_c * system.tu_s, cutoff_until[k] * system.tu_s))
        in_cutoff = t_c < cutoff_until[k]
        if in_cutoff:
            executed = np.zeros(3)
            commanded = np.zeros(3)
            g_exe = None
        truths[k][3:6] += executed
        new_fs = apply_impulse(fs, k, commanded, g_exe)
        fs.mean, fs.cov = new_fs.mean, new_fs.cov
        available_last[k] = not in_cutoff
        telemetry.maneuvers.append(ManeuverRecord(
            agent=k, epoch_s=t_c * system.tu_s,
            kind="absolute" if is_absolute else "relative",
            dv_commanded_mps=dv_tot[k] * vu_mps,
            dv_filtered_mps=commanded * vu_mps,
            dv_executed_mps=executed * vu_mps,
            filtered=bool(np.any(np.abs(dv_safe[k] - dv_tot[k]) > 0)),
            executed=bool(np.any(executed))))


def _to_si(state, system):
    out = np.empty(6)
    out[0:3] = state[0:3] * system.lu_km * 1e3
    out[3:6] = state[3:6] * system.vu_kms * 1e3
    return out


# -- campaign metrics --------------------------------------------------------------


@dataclass
class MetricsTable:
    """Campaign summary shaped like the headline performance table."""

    n_trials: int
    computed_abs_dv_cms_yr: tuple          # (mean, std)
    total_dv_cms_yr_per_agent: list        # [(mean, std), ...]
    separation_range_km: tuple             # (min, max)
    cbf_activation_rate_pct: float
    failed_trials: list
    name: str = ""
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "monte_carlo_trials": self.n_trials,
            "computed_absolute_dv_cms_per_year": {
                "mean": self.computed_abs_dv_cms_yr[0],
                "std": self.computed_abs_dv_cms_yr[1]},
            "total_executed_dv_cms_per_year_per_agent": [
                {"mean": m, "std": s} for (m, s) in self.total_dv_cms_yr_per_agent],
            "relative_separation_range_km": {
                "min": self.separation_range_km[0],
                "max": self.separation_range_km[1]},
            "cbf_activation_rate_percent": self.cbf_activation_rate_pct,
            "failed_trials": self.failed_trials,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")


def aggregate_metrics(telemetries, failures, cfg: ScenarioConfig) -> MetricsTable:
    per_year = [SECONDS_PER_YEAR / t.span_s for t in telemetries]
    abs_dv = np.array([t.computed_abs_dv_cms * f
                       for t, f in zip(telemetries, per_year)])
    totals = np.array([[t.executed_dv_cms(k) * f for k in range(cfg.n_agents)]
                       for t, f in zip(telemetries, per_year)])
    activations = np.concatenate(
        [[row[1] for row in t.cbf_rows] for t in telemetries]) if telemetries else []
    sep_min = min((t.sep_min_km for t in telemetries), default=math.inf)
    sep_max = max((t.sep_max_km for t in telemetries), default=0.0)
    std = (lambda a: float(np.std(a, ddof=1)) if len(a) > 1 else 0.0)
    return MetricsTable(
        n_trials=len(telemetries),
        computed_abs_dv_cms_yr=(float(np.mean(abs_dv)), std(abs_dv)),
        total_dv_cms_yr_per_agent=[(float(np.mean(totals[:, k])), std(totals[:, k]))
                                   for k in range(cfg.n_agents)],
        separation_range_km=(sep_min, sep_max),
        cbf_activation_rate_pct=float(100.0 * np.mean(activations))
        if len(activations) else 0.0,
        failed_trials=failures,
        name=cfg.name,
        seed=cfg.seed,
    )


def monte_carlo(cfg: ScenarioConfig, assets: CampaignAssets | None = None,
                workers: int = 1, system=DEFAULT_SYSTEM):
    """Run the configured trials; failures are reported, not dropped silently."""
    if assets is None:
        assets = build_campaign_assets(cfg, system)
    telemetries = []
    failures = []
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_trial, assets, i): i
                       for i in range(cfg.n_trials)}
            results: dict = {}
            for fut, i in futures.items():
                try:
                    results[i] = fut.result()
                except Exception as exc:  # noqa: BLE001 - reported per trial
                    failures.append({"trial": i, "error": str(exc)})
            telemetries = [results[i] for i in sorted(results)]
    else:
        for i in range(cfg.n_trials):
            try:
                telemetries.append(run_trial(assets, i))
            except Exception as exc:  # noqa: BLE001 - reported per trial
                failures.append({"trial": i, "error": str(exc)})
    if not telemetries:
        raise SimulationError(f"all trials failed: {failures}")
    return aggregate_metrics(telemetries, failures, cfg), telemetries
