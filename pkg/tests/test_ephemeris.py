"""Providers: circular/Keplerian kinematics, table loading and Hermite
interpolation round trips."""

import math

import numpy as np
import pytest

from nrhoform.constants import DEFAULT_SYSTEM
from nrhoform.ephemeris import (
    CircularProvider,
    EphemerisError,
    KeplerianProvider,
    body_state,
    load_table,
    save_table,
    solve_kepler,
)

SYS = DEFAULT_SYSTEM


def test_circular_moon_kinematics():
    prov = CircularProvider(SYS, include_sun=False)
    rec = prov.state("moon", 0.0)
    radius = (1.0 - SYS.mu) * SYS.lu_km
    np.testing.assert_allclose(rec.r_km, [radius, 0.0, 0.0], atol=1e-9)
    n = 1.0 / SYS.tu_s
    np.testing.assert_allclose(rec.v_kms, [0.0, radius * n, 0.0], atol=1e-12)
    assert abs(np.linalg.norm(rec.a_kms2) - n * n * radius) < 1e-15


def test_circular_barycenter_identity():
    prov = CircularProvider(SYS)
    for t in (0.0, 1e5, 3e6):
        e = prov.state("earth", t)
        m = prov.state("moon", t)
        resid = SYS.gm_earth * e.r_km + SYS.gm_moon * m.r_km
        assert np.linalg.norm(resid) / (SYS.gm_moon * SYS.lu_km) < 1e-12


def test_kepler_zero_eccentricity_equals_circular():
    circ = CircularProvider(SYS, include_sun=False)
    kep = KeplerianProvider(SYS, ecc=0.0, include_sun=False)
    for t in (0.0, 7.7e5, 4.2e6):
        for body in ("earth", "moon"):
            a = circ.state(body, t)
            b = kep.state(body, t)
            np.testing.assert_allclose(a.r_km, b.r_km, atol=1e-6)
            np.testing.assert_allclose(a.v_kms, b.v_kms, atol=1e-12)


def test_kepler_perigee_radius_closed_form():
    ecc = 0.0549
    kep = KeplerianProvider(SYS, ecc=ecc, include_sun=False)
    e = kep.state("earth", 0.0)
    m = kep.state("moon", 0.0)
    separation = np.linalg.norm(m.r_km - e.r_km)
    assert abs(separation - SYS.lu_km * (1.0 - ecc)) < 1e-6


def test_kepler_equation_solver():
    for ecc in (0.0, 0.3, 0.95):
        for m_anom in np.linspace(-7.0, 7.0, 17):
            e_anom = solve_kepler(m_anom, ecc)
            assert abs(e_anom - ecc * math.sin(e_anom) - m_anom) < 1e-12


def test_kepler_orbit_period_consistency():
    kep = KeplerianProvider(SYS, ecc=0.2, include_sun=False)
    period = 2.0 * math.pi * SYS.tu_s
    a = kep.state("moon", 1234.5)
    b = kep.state("moon", 1234.5 + period)
    np.testing.assert_allclose(a.r_km, b.r_km, atol=1e-5)


def test_provider_reproducible():
    kep = KeplerianProvider(SYS, ecc=0.0549)
    a = kep.state("moon", 98765.4)
    b = kep.state("moon", 98765.4)
    assert np.all(a.r_km == b.r_km) and np.all(a.v_kms == b.v_kms)


def test_unknown_body_rejected():
    with pytest.raises(EphemerisError):
        CircularProvider(SYS).state("phobos", 0.0)


# -- tabulated provider -------------------------------------------------------------


def _write_sampled_table(path, provider, bodies, epochs):
    records = {}
    for body in bodies:
        r = np.array([provider.state(body, t).r_km for t in epochs])
        v = np.array([provider.state(body, t).v_kms for t in epochs])
        records[body] = (epochs, r, v)
    save_table(path, records)


def test_table_minimal_four_rows(tmp_path):
    prov = CircularProvider(SYS, include_sun=False)
    epochs = np.arange(4) * 3600.0
    path = tmp_path / "eph.csv"
    _write_sampled_table(path, prov, ("earth", "moon"), epochs)
    table = load_table(path)
    assert table.coverage == (0.0, 3 * 3600.0)


def test_table_rejects_decreasing_epochs(tmp_path):
    path = tmp_path / "bad.csv"
    with open(path, "w") as fh:
        fh.write("body,epoch_s,rx_km,ry_km,rz_km,vx_kms,vy_kms,vz_kms\n")
        for t in (0.0, 3600.0, 1800.0, 7200.0):
            fh.write(f"moon,{t},1,0,0,0,1,0\n")
    with pytest.raises(EphemerisError, match="row"):
        load_table(path)


def test_table_rejects_malformed_row(tmp_path):
    path = tmp_path / "bad.csv"
    with open(path, "w") as fh:
        fh.write("body,epoch_s,rx_km,ry_km,rz_km,vx_kms,vy_kms,vz_kms\n")
        fh.write("moon,0,1,0,0,0,1,notanumber\n")
    with pytest.raises(EphemerisError, match="row 2"):
        load_table(path)


def test_table_rejects_insufficient_records(tmp_path):
    path = tmp_path / "bad.csv"
    with open(path, "w") as fh:
        fh.write("body,epoch_s,rx_km,ry_km,rz_km,vx_kms,vy_kms,vz_kms\n")
        fh.write("moon,0,1,0,0,0,1,0\nmoon,10,1,0,0,0,1,0\n")
    with pytest.raises(EphemerisError, match="4 records"):
        load_table(path)


def test_table_round_trip_against_provider_oracle(tmp_path):
    # 1-hour cadence samples of the Keplerian provider must interpolate
    # back to the provider within 1 m and 1 mm/s between the nodes
    prov = KeplerianProvider(SYS, ecc=0.0549, include_sun=False)
    epochs = np.arange(0.0, 40.0 * 3600.0, 3600.0)
    path = tmp_path / "kep.csv"
    _write_sampled_table(path, prov, ("earth", "moon"), epochs)
    table = load_table(path)
    mids = epochs[4:-4] + 1800.0
    for t in mids[::3]:
        got = table.state("moon", t)
        want = prov.state("moon", t)
        assert np.linalg.norm(got.r_km - want.r_km) < 1e-3       # 1 m
        assert np.linalg.norm(got.v_kms - want.v_kms) < 1e-6     # 1 mm/s


def test_table_velocity_is_position_derivative(tmp_path):
    prov = KeplerianProvider(SYS, ecc=0.0549, include_sun=False)
    epochs = np.arange(0.0, 30.0 * 3600.0, 3600.0)
    path = tmp_path / "kep.csv"
    _write_sampled_table(path, prov, ("moon",), epochs)
    table = load_table(path)
    h = 0.5
    for t in (5.3 * 3600.0, 11.1 * 3600.0, 20.9 * 3600.0):
        plus = table.state("moon", t + h).r_km
        minus = table.state("moon", t - h).r_km
        fd = (plus - minus) / (2.0 * h)
        v = table.state("moon", t).v_kms
        assert np.linalg.norm(fd - v) / np.linalg.norm(v) < 1e-6


def test_table_out_of_coverage(tmp_path):
    prov = CircularProvider(SYS, include_sun=False)
    epochs = np.arange(5) * 3600.0
    path = tmp_path / "eph.csv"
    _write_sampled_table(path, prov, ("moon",), epochs)
    table = load_table(path)
    with pytest.raises(EphemerisError):
        body_state(table, "moon", -10.0)


def test_table_self_test_report(tmp_path):
    prov = KeplerianProvider(SYS, ecc=0.0549, include_sun=False)
    epochs = np.arange(0.0, 40.0 * 3600.0, 3600.0)
    path = tmp_path / "kep.csv"
    _write_sampled_table(path, prov, ("moon",), epochs)
    table = load_table(path)
    report = table.interpolation_report["moon"]
    assert report["max_pos_err_km"] < 0.01
