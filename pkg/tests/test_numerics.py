"""Integration, eigendecomposition and conic solve kernels against
independent oracles (closed forms, companion-matrix roots, brute-force
active-set enumeration)."""

import itertools

import numpy as np
import pytest

from nrhoform.numerics import (
    ConicProblem,
    EigenError,
    IntegratorSpec,
    IntegrationError,
    SocConstraint,
    eig,
    integrate,
    solve_conic,
)


# -- integrator ---------------------------------------------------------------------


def test_integrate_constant_dynamics_identity():
    traj = integrate(lambda t, x: np.zeros(3), np.array([1.0, 2.0, 3.0]), 0.0, 5.0)
    np.testing.assert_allclose(traj.y_end, [1.0, 2.0, 3.0], atol=1e-14)


def test_integrate_harmonic_oscillator_closed_form():
    traj = integrate(lambda t, x: np.array([x[1], -x[0]]), np.array([1.0, 0.0]),
                     0.0, 2.0 * np.pi)
    np.testing.assert_allclose(traj.y_end, [1.0, 0.0], atol=1e-9)


def test_integrate_backward():
    traj = integrate(lambda t, x: np.array([x[1], -x[0]]), np.array([1.0, 0.0]),
                     2.0 * np.pi, 0.0)
    np.testing.assert_allclose(traj.y_end, [1.0, 0.0], atol=1e-9)


def test_integrate_dense_output_interpolates():
    traj = integrate(lambda t, x: np.array([x[1], -x[0]]), np.array([1.0, 0.0]),
                     0.0, 3.0)
    for t in [0.3, 1.1, 2.9]:
        np.testing.assert_allclose(traj(t), [np.cos(t), -np.sin(t)], atol=1e-10)


def test_integrate_nonfinite_derivative_rejected():
    with pytest.raises(IntegrationError):
        integrate(lambda t, x: np.array([np.nan]), np.array([1.0]), 0.0, 1.0)


def test_integrate_tolerance_scaling():
    # halving the tolerance must not increase the global error
    def err(rtol):
        spec = IntegratorSpec(rel_tol=rtol, abs_tol=rtol)
        traj = integrate(lambda t, x: np.array([x[1], -x[0]]),
                         np.array([1.0, 0.0]), 0.0, 20.0 * np.pi, spec)
        return np.linalg.norm(traj.y_end - np.array([1.0, 0.0]))

    errors = [err(r) for r in (1e-6, 1e-8, 1e-10, 1e-12)]
    for coarse, fine in zip(errors, errors[1:]):
        assert fine <= coarse * 1.5 + 1e-14


def test_integrate_cr3bp_jacobi_drift(system):
    from nrhoform.dynamics import Cr3bpModel, Cr3bpParams, jacobi_constant

    model = Cr3bpModel(Cr3bpParams(mu=system.mu))
    x0 = np.array([0.82, 0.0, 0.05, 0.0, 0.18, 0.02])
    c0 = jacobi_constant(x0, model.params)
    traj = integrate(model.derivative, x0, 0.0, 10.0)
    drift = abs(jacobi_constant(traj.y_end, model.params) - c0)
    assert drift < 1e-10


# -- eigendecomposition -------------------------------------------------------------


def test_eig_identity():
    dec = eig(np.eye(6))
    np.testing.assert_allclose(dec.eigenvalues, np.ones(6), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(dec.eigenvectors, axis=0), 1.0,
                               atol=1e-12)


def test_eig_embedded_rotation():
    theta = 0.7
    a = np.eye(6)
    a[0:2, 0:2] = [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
    dec = eig(a)
    lam = dec.eigenvalues
    rot = lam[np.abs(lam.imag) > 1e-12]
    assert len(rot) == 2
    np.testing.assert_allclose(sorted(rot.imag), [-np.sin(theta), np.sin(theta)],
                               atol=1e-12)
    np.testing.assert_allclose(np.abs(rot), 1.0, atol=1e-12)
    assert np.sum(np.abs(lam - 1.0) < 1e-12) == 4


def _companion_roots(a):
    """Characteristic polynomial roots via an independent companion matrix."""
    coeffs = np.poly(a)  # leading 1
    n = len(coeffs) - 1
    comp = np.zeros((n, n))
    comp[0, :] = -coeffs[1:] / coeffs[0]
    comp[1:, :-1] = np.eye(n - 1)
    return np.linalg.eigvals(comp)


def test_eig_matches_companion_matrix_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = rng.normal(size=(6, 6))
        got = np.sort_complex(eig(a).eigenvalues)
        want = np.sort_complex(_companion_roots(a))
        np.testing.assert_allclose(got, want, atol=1e-7)


def test_eig_sorted_by_centrality():
    a = np.diag([2.0, 0.5, 1.0, 1.1, 0.9, 10.0])
    dec = eig(a)
    centrality = np.abs(np.log(np.abs(dec.eigenvalues)))
    assert np.all(np.diff(centrality) >= -1e-12)


def test_eig_residual_and_reconstruction():
    rng = np.random.default_rng(5)
    for _ in range(5):
        a = rng.normal(size=(6, 6))
        dec = eig(a)
        assert dec.residual(a) <= 1e-8 * np.linalg.norm(a)
        recon = (dec.eigenvectors * dec.eigenvalues) @ np.linalg.inv(dec.eigenvectors)
        assert np.linalg.norm(a - recon.real) <= 1e-6 * np.linalg.norm(a)


def test_eig_rejects_nonfinite():
    a = np.eye(6)
    a[0, 0] = np.inf
    with pytest.raises(ValueError):
        eig(a)


# -- conic solves -------------------------------------------------------------------


def _min_norm_problem(n_extra_eq=None):
    # min ||x||_2 s.t. x = c, modeled with the epigraph variable x[3]
    c = np.array([1.0, -2.0, 0.5])
    soc = SocConstraint(np.hstack([np.eye(3), np.zeros((3, 1))]), np.zeros(3),
                        np.array([0.0, 0.0, 0.0, 1.0]), 0.0)
    return ConicProblem(n=4, q=np.array([0.0, 0.0, 0.0, 1.0]), socs=[soc],
                        a_eq=np.hstack([np.eye(3), np.zeros((3, 1))]), b_eq=c), c


def test_conic_fixed_point():
    prob, c = _min_norm_problem()
    sol = solve_conic(prob)
    assert sol.ok
    np.testing.assert_allclose(sol.x[:3], c, atol=1e-8)
    assert sol.kkt_residual <= 1e-8


def test_conic_least_norm_hyperplane():
    # min ||x|| s.t. a.x = 1 has the closed form a/||a||^2
    a = np.array([2.0, -1.0, 3.0])
    soc = SocConstraint(np.hstack([np.eye(3), np.zeros((3, 1))]), np.zeros(3),
                        np.array([0.0, 0.0, 0.0, 1.0]), 0.0)
    prob = ConicProblem(n=4, q=np.array([0, 0, 0, 1.0]), socs=[soc],
                        a_eq=np.array([[*a, 0.0]]), b_eq=np.array([1.0]))
    sol = solve_conic(prob)
    assert sol.ok
    np.testing.assert_allclose(sol.x[:3], a / (a @ a), atol=1e-8)


def _active_set_qp_oracle(p_mat, q, a_in, b_in):
    """Brute-force optimum of min 0.5 x'Px + q'x s.t. a_in x <= b_in."""
    m, n = a_in.shape
    best = (np.inf, None)
    for r in range(m + 1):
        for subset in itertools.combinations(range(m), r):
            rows = a_in[list(subset)]
            kkt = np.zeros((n + r, n + r))
            kkt[:n, :n] = p_mat
            rhs = np.concatenate([-q, b_in[list(subset)]])
            if r:
                kkt[:n, n:] = rows.T
                kkt[n:, :n] = rows
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            if np.any(a_in @ x - b_in > 1e-9) or np.any(lam < -1e-9):
                continue
            val = 0.5 * x @ p_mat @ x + q @ x
            if val < best[0]:
                best = (val, x)
    return best


def test_conic_qp_matches_active_set_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(8):
        n, m = 4, 6
        root = rng.normal(size=(n, n))
        p_mat = root @ root.T + 0.5 * np.eye(n)
        q = rng.normal(size=n)
        a_in = rng.normal(size=(m, n))
        b_in = rng.normal(size=m) + 1.0
        want_val, want_x = _active_set_qp_oracle(p_mat, q, a_in, b_in)
        if want_x is None:
            continue
        sol = solve_conic(ConicProblem(n=n, q=q, p_mat=p_mat, a_in=a_in, b_in=b_in))
        assert sol.ok
        assert abs(sol.objective - want_val) <= 1e-6 * max(1.0, abs(want_val))


def test_conic_feasibility_and_optimality_properties():
    rng = np.random.default_rng(13)
    prob, c = _min_norm_problem()
    sol = solve_conic(prob)
    assert prob.max_violation(sol.x) <= 1e-8
    # objective no worse than random feasible points (x fixed; t >= ||c||)
    for _ in range(20):
        t = np.linalg.norm(c) + abs(rng.normal()) * 2.0
        assert sol.objective <= t + 1e-9


def test_conic_infeasible_detected():
    # x >= 1 and x <= 0 cannot hold
    prob = ConicProblem(n=1, q=np.array([1.0]),
                        a_in=np.array([[1.0], [-1.0]]),
                        b_in=np.array([0.0, -1.0]))
    sol = solve_conic(prob)
    assert sol.status == "infeasible"


def test_conic_box_and_inequality():
    # min x + y s.t. x >= -1, y >= 2, x + y <= 10
    prob = ConicProblem(n=2, q=np.array([1.0, 1.0]),
                        a_in=np.array([[1.0, 1.0]]), b_in=np.array([10.0]),
                        lb=np.array([-1.0, 2.0]), ub=np.array([np.inf, np.inf]))
    sol = solve_conic(prob)
    assert sol.ok
    np.testing.assert_allclose(sol.x, [-1.0, 2.0], atol=1e-7)


def test_conic_dimension_validation():
    with pytest.raises(ValueError):
        ConicProblem(n=3, q=np.zeros(2))
    with pytest.raises(ValueError):
        ConicProblem(n=2, q=np.zeros(2), a_eq=np.zeros((1, 3)), b_eq=np.zeros(1))
