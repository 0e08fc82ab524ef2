"""Joint extended Kalman filtering over the formation's absolute states.

One filter estimates all agents jointly (6M states), which captures the
absolute/relative correlations the measurement architectures exploit:
ground pseudo-range anchors the absolute states while inter-satellite
links pin the relative geometry.  Measurement kinds are pseudo-range and
pseudo-range-rate, absolute (to a ground station) or relative (between
agents).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import propagate_with_stm
from .frames import body_in_rotating_frame
from .numerics import IntegratorSpec

MEASUREMENT_KINDS = ("absolute_range", "absolute_range_rate",
                     "relative_range", "relative_range_rate")


class NavigationError(RuntimeError):
    pass


@dataclass(frozen=True)
class MeasurementSpec:
    """One scheduled measurement.  Sigmas are 1-sigma in SI units
    (meters for ranges, m/s for range rates); epochs are normalized."""

    kind: str
    receiver: int
    transmitter: int | None
    sigma: float
    epoch: float

    def __post_init__(self):
        if self.kind not in MEASUREMENT_KINDS:
            raise ValueError(f"unknown measurement kind {self.kind!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.kind.startswith("relative"):
            if self.transmitter is None or self.transmitter == self.receiver:
                raise ValueError("relative kinds need two distinct agents")


@dataclass(frozen=True)
class Architecture:
    """Measurement topology: who ranges to ground, which pairs crosslink."""

    tag: str
    hub: int | None = None

    def __post_init__(self):
        if self.tag not in ("cluster", "fully_connected", "hub_spoke"):
            raise ValueError(f"unknown architecture {self.tag!r}")
        needs_hub = self.tag in ("cluster", "hub_spoke")
        if needs_hub and self.hub is None:
            raise ValueError(f"{self.tag} architecture requires a hub agent")
        if not needs_hub and self.hub is not None:
            raise ValueError("fully_connected architecture takes no hub")

    def absolute_agents(self, n_agents: int):
        if self.tag == "fully_connected":
            return list(range(n_agents))
        return [self.hub]

    def relative_pairs(self, n_agents: int):
        if self.tag == "hub_spoke":
            return [(self.hub, j) for j in range(n_agents) if j != self.hub]
        return [(i, j) for i in range(n_agents) for j in range(i + 1, n_agents)]


@dataclass
class FilterState:
    """Stacked mean (6M) and covariance (6M x 6M) at one epoch."""

    mean: np.ndarray
    cov: np.ndarray
    epoch: float

    @property
    def n_agents(self) -> int:
        return self.mean.size // 6

    def agent_mean(self, k: int) -> np.ndarray:
        return self.mean[6 * k:6 * k + 6]

    def agent_cov(self, k: int) -> np.ndarray:
        return self.cov[6 * k:6 * k + 6, 6 * k:6 * k + 6]

    def relative_cov(self, k: int, weights: np.ndarray) -> np.ndarray:
        """Covariance of (agent k minus a weighted combination of agents).

        ``weights`` is the (M,) vector defining the subtracted combination
        (e.g. the virtual-chief averaging weights).
        """
        m = self.n_agents
        sel = np.zeros((6, 6 * m))
        sel[:, 6 * k:6 * k + 6] = np.eye(6)
        for j in range(m):
            sel[:, 6 * j:6 * j + 6] -= weights[j] * np.eye(6)
        return sel @ self.cov @ sel.T


def process_noise_block(dt: float, accel_sigma: float) -> np.ndarray:
    """Continuous white-acceleration noise integrated over dt (one agent)."""
    q = accel_sigma**2
    i3 = np.eye(3)
    return np.block([[dt**3 / 3.0 * i3, dt**2 / 2.0 * i3],
                     [dt**2 / 2.0 * i3, dt * i3]]) * q


def predict(fs: FilterState, t_next: float, model, accel_sigma: float = 0.0,
            spec: IntegratorSpec | None = None,
            common_accel_sigma: float = 0.0) -> FilterState:
    """Nonlinear mean propagation with STM-based covariance propagation.

    ``accel_sigma`` is per-agent independent white acceleration (e.g.
    radiation-pressure dispersion); ``common_accel_sigma`` is shared by
    all agents (dynamics-model mismatch), so it inflates absolute
    knowledge but cancels out of relative states.
    """
    if t_next < fs.epoch - 1e-12:
        raise NavigationError("prediction epoch precedes the filter epoch")
    if abs(t_next - fs.epoch) < 1e-14:
        return FilterState(fs.mean.copy(), fs.cov.copy(), fs.epoch)
    spec = spec or IntegratorSpec(rel_tol=1e-10, abs_tol=1e-10)
    m = fs.n_agents
    mean = np.empty_like(fs.mean)
    blocks = []
    for k in range(m):
        xf, seg = propagate_with_stm(fs.agent_mean(k), fs.epoch, t_next, model, spec)
        mean[6 * k:6 * k + 6] = xf
        blocks.append(seg.phi)
    phi = np.zeros_like(fs.cov)
    for k in range(m):
        phi[6 * k:6 * k + 6, 6 * k:6 * k + 6] = blocks[k]
    cov = phi @ fs.cov @ phi.T
    dt = t_next - fs.epoch
    if accel_sigma > 0.0:
        qb = process_noise_block(dt, accel_sigma)
        for k in range(m):
            cov[6 * k:6 * k + 6, 6 * k:6 * k + 6] += qb
    if common_accel_sigma > 0.0:
        qc = process_noise_block(dt, common_accel_sigma)
        cov += np.kron(np.ones((m, m)), qc)
    cov = 0.5 * (cov + cov.T)
    return FilterState(mean=mean, cov=cov, epoch=float(t_next))


def apply_impulse(fs: FilterState, agent: int, dv, g_exe=None) -> FilterState:
    """Fold a commanded impulse (and its execution-error covariance) in."""
    mean = fs.mean.copy()
    mean[6 * agent + 3:6 * agent + 6] += np.asarray(dv, dtype=float)
    cov = fs.cov.copy()
    if g_exe is not None:
        sl = slice(6 * agent + 3, 6 * agent + 6)
        cov[sl, sl] += np.asarray(g_exe) @ np.asarray(g_exe).T
    return FilterState(mean=mean, cov=cov, epoch=fs.epoch)


def measurement_value(kind: str, rx_state, tx_state) -> float:
    """Noise-free measurement in normalized units."""
    rho = np.asarray(rx_state[0:3]) - np.asarray(tx_state[0:3])
    rng = np.linalg.norm(rho)
    if rng < 1e-12:
        raise NavigationError("undefined line of sight (coincident endpoints)")
    if kind.endswith("range_rate"):
        drho = np.asarray(rx_state[3:6]) - np.asarray(tx_state[3:6])
        return float(rho @ drho / rng)
    return float(rng)


def _measurement_jacobian(kind: str, rx_state, tx_state):
    rho = np.asarray(rx_state[0:3]) - np.asarray(tx_state[0:3])
    rng = np.linalg.norm(rho)
    if rng < 1e-12:
        raise NavigationError("undefined line of sight (coincident endpoints)")
    rho_hat = rho / rng
    h_rx = np.zeros(6)
    if kind.endswith("range_rate"):
        drho = np.asarray(rx_state[3:6]) - np.asarray(tx_state[3:6])
        h_rx[0:3] = (drho - rho_hat * (rho_hat @ drho)) / rng
        h_rx[3:6] = rho_hat
    else:
        h_rx[0:3] = rho_hat
    return h_rx


def _sigma_normalized(spec: MeasurementSpec, system) -> float:
    if spec.kind.endswith("range_rate"):
        return spec.sigma / 1e3 / system.vu_kms
    return spec.sigma / 1e3 / system.lu_km


def update(fs: FilterState, measurements, values, system,
           ground_state_fn=None):
    """Joseph-form EKF update with a batch of same-epoch measurements.

    ``values`` are the measured numbers in normalized units, aligned with
    ``measurements``.  Returns (FilterState, innovations array).
    """
    if not measurements:
        return fs, np.empty(0)
    m_agents = fs.n_agents
    n = fs.mean.size
    h_rows = []
    predicted = []
    sigmas = []
    for spec in measurements:
        if abs(spec.epoch - fs.epoch) > 1e-9:
            raise NavigationError("measurement epoch does not match filter epoch")
        rx = fs.agent_mean(spec.receiver)
        if spec.kind.startswith("absolute"):
            if ground_state_fn is None:
                raise NavigationError("absolute measurements need a ground state")
            tx = ground_state_fn(fs.epoch)
            h_tx_target = None
        else:
            tx = fs.agent_mean(spec.transmitter)
            h_tx_target = spec.transmitter
        predicted.append(measurement_value(spec.kind, rx, tx))
        h_rx = _measurement_jacobian(spec.kind, rx, tx)
        row = np.zeros(n)
        row[6 * spec.receiver:6 * spec.receiver + 6] = h_rx
        if h_tx_target is not None:
            row[6 * h_tx_target:6 * h_tx_target + 6] = -h_rx
        h_rows.append(row)
        sigmas.append(_sigma_normalized(spec, system))
    h_mat = np.array(h_rows)
    r_mat = np.diag(np.square(sigmas))
    innov = np.asarray(values, dtype=float) - np.array(predicted)
    s_mat = h_mat @ fs.cov @ h_mat.T + r_mat
    try:
        gain = np.linalg.solve(s_mat, h_mat @ fs.cov).T
    except np.linalg.LinAlgError as exc:
        raise NavigationError("singular innovation covariance") from exc
    mean = fs.mean + gain @ innov
    ikh = np.eye(n) - gain @ h_mat
    cov = ikh @ fs.cov @ ikh.T + gain @ r_mat @ gain.T
    cov = 0.5 * (cov + cov.T)
    return FilterState(mean=mean, cov=cov, epoch=fs.epoch), innov


def ground_station_state(provider, t_norm: float, system, origin: str = "moon"):
    """Normalized rotating-frame state of the ground station (Earth center)."""
    t_s = t_norm * system.tu_s
    r, v = body_in_rotating_frame(provider, "earth", t_s, origin, system)
    return np.concatenate([r, v])


# -- measurement scheduling ---------------------------------------------------------


@dataclass(frozen=True)
class NavigationParams:
    """Measurement and initialization noise (values are 3-sigma, SI)."""

    initial_abs_pos_3sigma_km: float = 1.0
    initial_abs_vel_3sigma_cms: float = 1.0
    initial_rel_pos_3sigma_m: float = 1.0
    initial_rel_vel_3sigma_mms: float = 0.1
    abs_range_3sigma_m: float = 1.0
    abs_range_rate_3sigma_mms: float = 0.1
    rel_range_3sigma_m: float = 1.0
    rel_range_rate_3sigma_mms: float = 0.1


ABSOLUTE_TRACK_OFFSETS_H = (-72.0, -48.0, -7.0, 12.0)


def schedule_measurements(schedules, architecture: Architecture, n_agents: int,
                          system, params: NavigationParams = NavigationParams(),
                          span=None, samples_per_track: int = 10,
                          track_span_h: float = 1.0) -> list:
    """Measurement specs for a maneuver schedule under one architecture.

    Absolute tracks start at fixed offsets from each absolute maneuver
    (relative ranging co-scheduled); one relative-only track ends at each
    relative maneuver.  Tracks falling outside ``span`` are dropped.
    """
    hour = 3600.0 / system.tu_s
    sig_ar = params.abs_range_3sigma_m / 3.0
    sig_arr = params.abs_range_rate_3sigma_mms / 3.0 / 1e3
    sig_rr = params.rel_range_3sigma_m / 3.0
    sig_rrr = params.rel_range_rate_3sigma_mms / 3.0 / 1e3
    out = []

    def add_track(t_start: float, include_absolute: bool):
        for i in range(samples_per_track):
            t = t_start + track_span_h * hour * i / (samples_per_track - 1)
            if span is not None and not (span[0] <= t <= span[1]):
                continue
            if include_absolute:
                for k in architecture.absolute_agents(n_agents):
                    out.append(MeasurementSpec("absolute_range", k, None, sig_ar, t))
                    out.append(MeasurementSpec("absolute_range_rate", k, None, sig_arr, t))
            for (a, b) in architecture.relative_pairs(n_agents):
                out.append(MeasurementSpec("relative_range", b, a, sig_rr, t))
                out.append(MeasurementSpec("relative_range_rate", b, a, sig_rrr, t))

    for sched in schedules:
        for off in ABSOLUTE_TRACK_OFFSETS_H:
            add_track(sched.absolute_epoch + off * hour, include_absolute=True)
        for t_rel in sched.relative_epochs:
            add_track(t_rel - track_span_h * hour, include_absolute=False)
    out.sort(key=lambda s: (s.epoch, s.kind, s.receiver,
                            -1 if s.transmitter is None else s.transmitter))
    return out


def nees(fs: FilterState, truth_stacked) -> float:
    """Normalized estimation error squared of the full stacked state."""
    err = fs.mean - np.asarray(truth_stacked, dtype=float).ravel()
    return float(err @ np.linalg.solve(fs.cov, err))
