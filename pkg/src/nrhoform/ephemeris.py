"""Celestial body state providers (position/velocity/acceleration vs epoch).

Three interchangeable providers replace binary kernel ingestion:

* ``CircularProvider``  - Earth and Moon on circles about their barycenter,
  consistent with the circular restricted model by construction.
* ``KeplerianProvider`` - Moon on a fixed ellipse about the barycenter
  (captures the dominant eccentricity wobble), circular solar motion.
* ``TableProvider``     - cubic Hermite interpolation of a CSV table so
  externally exported ephemeris data can drive the dynamics.

All providers report states in an Earth-Moon-barycenter-centered frame
that does not rotate; epochs are seconds past the reference epoch.
Bodies whose name is not "earth" or "moon" are treated by the dynamics
as differential (tidal) perturbers about that origin.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .constants import DEFAULT_SYSTEM, EarthMoonSystem

CSV_HEADER = ["body", "epoch_s", "rx_km", "ry_km", "rz_km", "vx_kms", "vy_kms", "vz_kms"]


class EphemerisError(RuntimeError):
    pass


@dataclass(frozen=True)
class BodyStateRecord:
    """Inertial-frame state of one body at one epoch (km, km/s, km/s^2)."""

    body: str
    epoch_s: float
    r_km: np.ndarray
    v_kms: np.ndarray
    a_kms2: np.ndarray


def _record(body, t, r, v, a):
    return BodyStateRecord(body, float(t), np.asarray(r, float),
                           np.asarray(v, float), np.asarray(a, float))


class CircularProvider:
    """Primaries on circles about the barycenter; optional circular Sun.

    At epoch 0 the Moon sits on +x at the mean distance and both primaries
    rotate at the mean motion, which makes the rotating-frame dynamics
    exactly the circular restricted model.
    """

    def __init__(self, system: EarthMoonSystem = DEFAULT_SYSTEM,
                 include_sun: bool = True, sun_phase0: float = 0.0):
        self.system = system
        self.include_sun = include_sun
        self.sun_phase0 = float(sun_phase0)
        self.coverage = (-np.inf, np.inf)

    @property
    def bodies(self):
        return ("earth", "moon", "sun") if self.include_sun else ("earth", "moon")

    def state(self, body: str, epoch_s: float) -> BodyStateRecord:
        sys = self.system
        n = 1.0 / sys.tu_s  # rad/s
        if body in ("earth", "moon"):
            radius = -sys.mu * sys.lu_km if body == "earth" else (1.0 - sys.mu) * sys.lu_km
            th = n * epoch_s
            c, s = math.cos(th), math.sin(th)
            r = np.array([radius * c, radius * s, 0.0])
            v = np.array([-radius * n * s, radius * n * c, 0.0])
            a = -(n * n) * r
            return _record(body, epoch_s, r, v, a)
        if body == "sun" and self.include_sun:
            ns = sys.sun_mean_motion / sys.tu_s
            th = ns * epoch_s + self.sun_phase0
            c, s = math.cos(th), math.sin(th)
            r = sys.au_km * np.array([c, s, 0.0])
            v = sys.au_km * ns * np.array([-s, c, 0.0])
            a = -(ns * ns) * r
            return _record(body, epoch_s, r, v, a)
        raise EphemerisError(f"unknown body {body!r}")


class KeplerianProvider:
    """Moon on a fixed ellipse about the barycenter, circular Sun.

    The Earth-Moon separation follows a planar two-body ellipse with
    semi-major axis equal to the mean distance; ``ecc=0`` reduces exactly
    to the circular provider.  Perigee lies on +x at epoch 0 by default.
    """

    def __init__(self, system: EarthMoonSystem = DEFAULT_SYSTEM, ecc: float = 0.0549,
                 include_sun: bool = True, sun_phase0: float = 0.0,
                 arg_perigee: float = 0.0, mean_anomaly0: float = 0.0):
        if not 0.0 <= ecc < 1.0:
            raise ValueError("eccentricity must be in [0, 1)")
        self.system = system
        self.ecc = float(ecc)
        self.include_sun = include_sun
        self.sun_phase0 = float(sun_phase0)
        self.arg_perigee = float(arg_perigee)
        self.mean_anomaly0 = float(mean_anomaly0)
        self.coverage = (-np.inf, np.inf)
        self._sun = CircularProvider(system, include_sun=True, sun_phase0=sun_phase0)

    @property
    def bodies(self):
        return ("earth", "moon", "sun") if self.include_sun else ("earth", "moon")

    def _relative_orbit(self, epoch_s: float):
        """Earth->Moon vector, velocity and acceleration from Kepler's equation."""
        sys = self.system
        a = sys.lu_km
        e = self.ecc
        n = 1.0 / sys.tu_s
        m_anom = self.mean_anomaly0 + n * epoch_s
        big_e = solve_kepler(m_anom, e)
        ce, se = math.cos(big_e), math.sin(big_e)
        one_me = 1.0 - e * ce
        edot = n / one_me
        sq = math.sqrt(1.0 - e * e)
        # perifocal coordinates, then rotate by argument of perigee in-plane
        xp, yp = a * (ce - e), a * sq * se
        vxp, vyp = -a * se * edot, a * sq * ce * edot
        cw, sw = math.cos(self.arg_perigee), math.sin(self.arg_perigee)
        r = np.array([cw * xp - sw * yp, sw * xp + cw * yp, 0.0])
        v = np.array([cw * vxp - sw * vyp, sw * vxp + cw * vyp, 0.0])
        acc = -sys.gm_total * r / np.linalg.norm(r) ** 3
        return r, v, acc

    def state(self, body: str, epoch_s: float) -> BodyStateRecord:
        sys = self.system
        if body in ("earth", "moon"):
            r_em, v_em, a_em = self._relative_orbit(epoch_s)
            scale = -sys.mu if body == "earth" else (1.0 - sys.mu)
            return _record(body, epoch_s, scale * r_em, scale * v_em, scale * a_em)
        if body == "sun" and self.include_sun:
            return self._sun.state("sun", epoch_s)
        raise EphemerisError(f"unknown body {body!r}")


def solve_kepler(mean_anomaly: float, ecc: float, tol: float = 1e-14) -> float:
    """Eccentric anomaly from mean anomaly (Danby starter + Newton)."""
    m = math.fmod(mean_anomaly, 2.0 * math.pi)
    e_anom = m + 0.85 * ecc * (1.0 if math.sin(m) >= 0.0 else -1.0)
    for _ in range(60):
        f = e_anom - ecc * math.sin(e_anom) - m
        if abs(f) < tol:
            break
        e_anom -= f / (1.0 - ecc * math.cos(e_anom))
    return e_anom + (mean_anomaly - m)


@dataclass
class _BodyTable:
    epochs: np.ndarray        # (n,)
    r: np.ndarray             # (n, 3) km
    v: np.ndarray             # (n, 3) km/s
    a: np.ndarray             # (n, 3) km/s^2, finite-differenced


class EphemerisTable:
    """Tabulated body states with cubic Hermite interpolation.

    Position uses (r, v) Hermite segments; velocity uses (v, a_fd) with
    node accelerations finite-differenced from the velocity column, which
    keeps both interpolants C1 in epoch.
    """

    def __init__(self, tables: dict):
        self._tables = tables
        self.interpolation_report = self._self_test()

    @property
    def bodies(self):
        return tuple(sorted(self._tables))

    @property
    def coverage(self):
        lo = max(float(t.epochs[0]) for t in self._tables.values())
        hi = min(float(t.epochs[-1]) for t in self._tables.values())
        return (lo, hi)

    def _segment(self, tab: _BodyTable, epoch_s: float):
        t = tab.epochs
        if epoch_s < t[0] or epoch_s > t[-1]:
            raise EphemerisError(
                f"epoch {epoch_s} outside table coverage [{t[0]}, {t[-1]}]")
        k = int(np.searchsorted(t, epoch_s, side="right") - 1)
        k = min(max(k, 0), len(t) - 2)
        return k, float(t[k + 1] - t[k])

    @staticmethod
    def _hermite(p0, p1, m0, m1, h, u):
        """Cubic Hermite value and derivative at fractional position u."""
        u2, u3 = u * u, u * u * u
        h00, h10 = 2 * u3 - 3 * u2 + 1, u3 - 2 * u2 + u
        h01, h11 = -2 * u3 + 3 * u2, u3 - u2
        val = h00 * p0 + h10 * h * m0 + h01 * p1 + h11 * h * m1
        d00, d10 = 6 * u2 - 6 * u, 3 * u2 - 4 * u + 1
        d01, d11 = -6 * u2 + 6 * u, 3 * u2 - 2 * u
        der = (d00 * p0 + d01 * p1) / h + d10 * m0 + d11 * m1
        return val, der

    def state(self, body: str, epoch_s: float) -> BodyStateRecord:
        if body not in self._tables:
            raise EphemerisError(f"unknown body {body!r}")
        tab = self._tables[body]
        k, h = self._segment(tab, epoch_s)
        u = (epoch_s - tab.epochs[k]) / h
        r, _ = self._hermite(tab.r[k], tab.r[k + 1], tab.v[k], tab.v[k + 1], h, u)
        v, a = self._hermite(tab.v[k], tab.v[k + 1], tab.a[k], tab.a[k + 1], h, u)
        return _record(body, epoch_s, r, v, a)

    def _self_test(self) -> dict:
        """Leave-one-node-out interpolation error against held-out rows."""
        report = {}
        for body, tab in self._tables.items():
            n = len(tab.epochs)
            if n < 5:
                report[body] = {"max_pos_err_km": 0.0, "max_vel_err_kms": 0.0}
                continue
            pos_err = vel_err = 0.0
            for k in range(2, n - 2, max(1, (n - 4) // 16)):
                h = float(tab.epochs[k + 1] - tab.epochs[k - 1])
                u = float(tab.epochs[k] - tab.epochs[k - 1]) / h
                r, _ = self._hermite(tab.r[k - 1], tab.r[k + 1],
                                     tab.v[k - 1], tab.v[k + 1], h, u)
                v, _ = self._hermite(tab.v[k - 1], tab.v[k + 1],
                                     tab.a[k - 1], tab.a[k + 1], h, u)
                pos_err = max(pos_err, float(np.linalg.norm(r - tab.r[k])))
                vel_err = max(vel_err, float(np.linalg.norm(v - tab.v[k])))
            report[body] = {"max_pos_err_km": pos_err, "max_vel_err_kms": vel_err}
        return report


# TableProvider is an alias in spirit; the table IS the provider.
TableProvider = EphemerisTable


def load_table(path) -> EphemerisTable:
    """Load an ephemeris CSV (header: body,epoch_s,rx_km,...,vz_kms)."""
    per_body: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != CSV_HEADER:
            raise EphemerisError(f"bad header, expected {','.join(CSV_HEADER)}")
        for i, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 8:
                raise EphemerisError(f"row {i}: expected 8 fields, got {len(row)}")
            try:
                vals = [float(x) for x in row[1:]]
            except ValueError as exc:
                raise EphemerisError(f"row {i}: {exc}") from exc
            if not all(math.isfinite(v) for v in vals):
                raise EphemerisError(f"row {i}: non-finite value")
            per_body.setdefault(row[0].strip().lower(), []).append((i, vals))

    tables = {}
    for body, rows in per_body.items():
        if len(rows) < 4:
            raise EphemerisError(f"body {body!r}: need >= 4 records, got {len(rows)}")
        epochs = np.array([r[1][0] for r in rows])
        diffs = np.diff(epochs)
        if np.any(diffs <= 0):
            bad = int(np.argmax(diffs <= 0))
            raise EphemerisError(
                f"body {body!r}: non-increasing epoch at row {rows[bad + 1][0]}")
        r = np.array([r[1][1:4] for r in rows])
        v = np.array([r[1][4:7] for r in rows])
        a = np.gradient(v, epochs, axis=0)
        tables[body] = _BodyTable(epochs=epochs, r=r, v=v, a=a)
    return EphemerisTable(tables)


def save_table(path, records: dict):
    """Write per-body arrays {body: (epochs, r_km, v_kms)} to the CSV format."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for body, (epochs, r, v) in records.items():
            for t, ri, vi in zip(epochs, r, v):
                writer.writerow([body, repr(float(t))]
                                + [repr(float(x)) for x in ri]
                                + [repr(float(x)) for x in vi])


def body_state(provider, body: str, epoch_s: float) -> BodyStateRecord:
    """Uniform access point for any provider type."""
    lo, hi = provider.coverage
    if not (lo <= epoch_s <= hi):
        raise EphemerisError(f"epoch {epoch_s} outside provider coverage")
    return provider.state(body, epoch_s)
