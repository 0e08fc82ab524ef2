"""Equations of motion against finite-difference oracles and conserved
quantities; frame transforms; STM propagation structure."""

import numpy as np
import pytest

from nrhoform.constants import DEFAULT_SYSTEM
from nrhoform.dynamics import (
    BodySpec,
    Cr3bpModel,
    Cr3bpParams,
    DynamicsError,
    HfemModel,
    HfemParams,
    StmSegment,
    collinear_equilibrium,
    cr3bp_derivative,
    cr3bp_jacobian,
    hfem_derivative,
    jacobi_constant,
    propagate_with_stm,
    pseudo_potential,
    shift_origin,
    symplectic_defect,
)
from nrhoform.ephemeris import CircularProvider
from nrhoform.frames import synodic_to_vnb
from nrhoform.numerics import IntegratorSpec

SYS = DEFAULT_SYSTEM
P = Cr3bpParams(mu=SYS.mu)
GENERIC = np.array([0.83, 0.12, -0.21, 0.05, -0.11, 0.2])


# -- restricted-model derivative ----------------------------------------------------


def test_cr3bp_vanishing_mass_ratio_corotating_point():
    # unit-radius co-rotating point opposite the primaries: centrifugal
    # balances gravity as mu -> 0
    tiny = Cr3bpParams(mu=1e-12)
    acc = cr3bp_derivative(0.0, np.array([-1.0, 0, 0, 0, 0, 0]), tiny)[3:]
    assert np.linalg.norm(acc) < 1e-11


def test_cr3bp_equilibrium_at_l2():
    xl2 = collinear_equilibrium(P, 2)
    deriv = cr3bp_derivative(0.0, np.array([xl2, 0, 0, 0, 0, 0]), P)
    assert np.linalg.norm(deriv[3:]) < 1e-10


def test_cr3bp_acceleration_matches_potential_gradient():
    state = GENERIC

    def omega(r):
        return pseudo_potential(np.concatenate([r, np.zeros(3)]), P)

    h = 1e-6
    grad = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        grad[i] = (omega(state[0:3] + e) - omega(state[0:3] - e)) / (2 * h)
    coriolis = -2.0 * np.cross([0.0, 0.0, 1.0], state[3:6])
    np.testing.assert_allclose(cr3bp_derivative(0.0, state, P)[3:],
                               grad + coriolis, atol=1e-6)


def test_cr3bp_collision_raises():
    with pytest.raises(DynamicsError):
        cr3bp_derivative(0.0, np.array([1.0 - P.mu, 0, 0, 0, 0, 0]), P)


# -- Jacobian -----------------------------------------------------------------------


def test_cr3bp_jacobian_kinematic_structure():
    a = cr3bp_jacobian(0.0, GENERIC, P)
    np.testing.assert_allclose(a[0:3, 0:3], np.zeros((3, 3)), atol=0)
    np.testing.assert_allclose(a[0:3, 3:6], np.eye(3), atol=0)
    np.testing.assert_allclose(a[3:6, 0:3], a[3:6, 0:3].T, atol=1e-14)


def test_cr3bp_jacobian_matches_finite_differences():
    a = cr3bp_jacobian(0.0, GENERIC, P)
    h = 1e-6
    fd = np.zeros((6, 6))
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        fd[:, j] = (cr3bp_derivative(0.0, GENERIC + e, P)
                    - cr3bp_derivative(0.0, GENERIC - e, P)) / (2 * h)
    np.testing.assert_allclose(a, fd, atol=1e-5)


def test_cr3bp_jacobian_traceless():
    rng = np.random.default_rng(2)
    for _ in range(5):
        state = GENERIC + 0.1 * rng.normal(size=6)
        assert abs(np.trace(cr3bp_jacobian(0.0, state, P))) < 1e-12


# -- high-fidelity model ------------------------------------------------------------


@pytest.fixture(scope="module")
def circular_two_body_model():
    provider = CircularProvider(SYS, include_sun=False)
    params = HfemParams(bodies=(BodySpec("earth", SYS.gm_earth),
                                BodySpec("moon", SYS.gm_moon)))
    return HfemModel(params, provider, SYS)


def test_hfem_reduces_to_cr3bp_with_circular_provider(circular_two_body_model):
    state = np.array([0.02, -0.05, 0.12, 0.3, -0.2, 0.1])
    for t in (0.0, 0.7, 3.1):
        got = circular_two_body_model.derivative(t, state)
        want = cr3bp_derivative(t, shift_origin(state, SYS, to="barycenter"), P)
        np.testing.assert_allclose(got, want, atol=1e-9)


def test_hfem_srp_zero_magnitude_is_noop():
    provider = CircularProvider(SYS, include_sun=True)
    base = HfemParams()
    with_srp = HfemParams(srp=True, srp_accel_mm_s2=0.0)
    state = np.array([0.02, -0.05, 0.12, 0.0, 0.0, 0.0])
    a = HfemModel(base, provider, SYS).derivative(0.3, state)
    b = HfemModel(with_srp, provider, SYS).derivative(0.3, state)
    np.testing.assert_allclose(a, b, atol=0)


def test_hfem_sun_gm_enters_only_differentially():
    provider = CircularProvider(SYS, include_sun=True)
    state = np.array([0.02, -0.05, 0.12, 0.1, 0.0, -0.2])

    def accel(gm_sun):
        params = HfemParams(bodies=(
            BodySpec("earth", SYS.gm_earth), BodySpec("moon", SYS.gm_moon),
            BodySpec("sun", gm_sun, differential=True)))
        return HfemModel(params, provider, SYS).derivative(0.4, state)

    base = accel(SYS.gm_sun)
    double = accel(2.0 * SYS.gm_sun)
    # linear in the perturber GM: doubling doubles the differential term
    params0 = HfemParams(bodies=(BodySpec("earth", SYS.gm_earth),
                                 BodySpec("moon", SYS.gm_moon)))
    none = HfemModel(params0, provider, SYS).derivative(0.4, state)
    np.testing.assert_allclose(double - base, base - none, rtol=1e-9)


def test_hfem_jacobian_matches_finite_differences(circular_two_body_model):
    state = np.array([0.02, -0.05, 0.12, 0.3, -0.2, 0.1])
    a = circular_two_body_model.jacobian(0.23, state)
    h = 1e-6
    fd = np.zeros((6, 6))
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        fd[:, j] = (circular_two_body_model.derivative(0.23, state + e)
                    - circular_two_body_model.derivative(0.23, state - e)) / (2 * h)
    np.testing.assert_allclose(a, fd, atol=1e-5)


def test_hfem_cache_matches_direct(circular_two_body_model):
    provider = circular_two_body_model.provider
    cached = HfemModel(circular_two_body_model.params, provider, SYS,
                       cache_span=(0.0, 3.0))
    state = np.array([0.02, -0.05, 0.12, 0.3, -0.2, 0.1])
    for t in np.linspace(0.05, 2.95, 13):
        np.testing.assert_allclose(cached.derivative(t, state),
                                   circular_two_body_model.derivative(t, state),
                                   atol=1e-11)


def test_hfem_derivative_function_form():
    provider = CircularProvider(SYS, include_sun=False)
    params = HfemParams(bodies=(BodySpec("earth", SYS.gm_earth),
                                BodySpec("moon", SYS.gm_moon)))
    state = np.array([0.02, -0.05, 0.12, 0.3, -0.2, 0.1])
    got = hfem_derivative(0.0, state, params, provider)
    want = cr3bp_derivative(0.0, shift_origin(state, SYS, to="barycenter"), P)
    np.testing.assert_allclose(got, want, atol=1e-9)


# -- STM propagation ----------------------------------------------------------------


def test_stm_zero_span_is_identity():
    model = Cr3bpModel(P)
    xf, seg = propagate_with_stm(GENERIC, 1.0, 1.0, model)
    np.testing.assert_allclose(seg.phi, np.eye(6), atol=0)
    np.testing.assert_allclose(xf, GENERIC, atol=0)


def test_stm_matches_central_difference_flow(nrho):
    model = Cr3bpModel(P)
    x0 = nrho.initial_state
    t1 = 0.4 * nrho.period
    _, seg = propagate_with_stm(x0, 0.0, t1, model)
    eps = 1e-7
    fd = np.zeros((6, 6))
    for j in range(6):
        e = np.zeros(6)
        e[j] = eps
        plus, _ = propagate_with_stm(x0 + e, 0.0, t1, model)
        minus, _ = propagate_with_stm(x0 - e, 0.0, t1, model)
        fd[:, j] = (plus - minus) / (2 * eps)
    assert np.linalg.norm(seg.phi - fd) / np.linalg.norm(seg.phi) < 1e-5


def test_stm_composition(nrho):
    model = Cr3bpModel(P)
    t_mid, t_end = 0.3, 0.8
    x_mid, seg1 = propagate_with_stm(nrho.initial_state, 0.0, t_mid, model)
    _, seg2 = propagate_with_stm(x_mid, t_mid, t_end, model)
    _, seg_full = propagate_with_stm(nrho.initial_state, 0.0, t_end, model)
    composed = seg2.compose(seg1)
    assert (np.linalg.norm(composed.phi - seg_full.phi)
            / np.linalg.norm(seg_full.phi)) < 1e-6


def test_monodromy_symplectic_structure(nrho):
    phi = nrho.monodromy.phi
    assert abs(np.linalg.det(phi) - 1.0) < 1e-6
    assert symplectic_defect(phi) < 1e-5
    lam = np.linalg.eigvals(phi)
    # eigenvalues come in reciprocal pairs
    for v in lam:
        assert np.min(np.abs(lam - 1.0 / v)) < 1e-5 * max(1.0, abs(1.0 / v))


def test_jacobi_conserved_over_period(nrho):
    model = Cr3bpModel(P)
    c0 = jacobi_constant(nrho.initial_state, P)
    xf, _ = propagate_with_stm(nrho.initial_state, 0.0, nrho.period, model)
    assert abs(jacobi_constant(xf, P) - c0) < 1e-10


def test_jacobi_closed_forms():
    tiny = Cr3bpParams(mu=1e-12)
    assert abs(jacobi_constant(np.array([-1.0, 0, 0, 0, 0, 0]), tiny) - 3.0) < 1e-9
    state = GENERIC.copy()
    state[3:6] = 0.0
    c_rest = jacobi_constant(state, P)
    w = 0.37
    state[3] = w
    assert abs(jacobi_constant(state, P) - (c_rest - w**2)) < 1e-12


# -- VNB frame ----------------------------------------------------------------------


def test_vnb_velocity_column():
    state = np.array([0.9, 0.1, 0.0, 1.0, 0.0, 0.0])
    r = synodic_to_vnb(state, np.array([0.98, 0.0, 0.0]))
    np.testing.assert_allclose(r[:, 0], [1.0, 0.0, 0.0], atol=1e-14)


def test_vnb_orthonormal_right_handed():
    rng = np.random.default_rng(4)
    for _ in range(10):
        state = rng.normal(size=6)
        moon = rng.normal(size=3)
        try:
            r = synodic_to_vnb(state, moon)
        except ValueError:
            continue
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(r) - 1.0) < 1e-12


def test_vnb_round_trip():
    state = np.array([0.9, 0.1, -0.05, 0.3, 0.4, 0.1])
    r = synodic_to_vnb(state, np.array([0.98, 0.0, 0.0]))
    dr = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(r @ (r.T @ dr), dr, atol=1e-12)


def test_vnb_degenerate_rejected():
    state = np.array([1.0, 0.0, 0.0, 0.5, 0.0, 0.0])
    with pytest.raises(ValueError):
        synodic_to_vnb(state, np.array([0.5, 0.0, 0.0]))  # v parallel to r - r_M
