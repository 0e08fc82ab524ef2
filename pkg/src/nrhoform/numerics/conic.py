"""Small dense conic program solver: quadratic/linear objective over
affine equalities, affine inequalities, box bounds, and second-order
cones.

Problems in this package are tiny (tens of variables), so everything is
dense and solutions are verified against explicitly computed KKT
residuals after the interior-point solve (cvxopt conelp/coneqp).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import cvxopt
import cvxopt.solvers


class ConicError(RuntimeError):
    """Conic solve failed in a way the caller cannot recover from."""


_OPTIONS = {
    "show_progress": False,
    "abstol": 1e-10,
    "reltol": 1e-10,
    "feastol": 1e-9,
    "maxiters": 200,
    "refinement": 2,
}


@dataclass(frozen=True)
class SocConstraint:
    """Second-order cone constraint ||a_mat @ x + b|| <= c @ x + d."""

    a_mat: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: float


@dataclass
class ConicProblem:
    """Carrier for a small conic program.

    minimize    0.5 x' P x + q' x
    subject to  a_eq x = b_eq
                a_in x <= b_in
                lb <= x <= ub
                ||soc.a_mat x + soc.b|| <= soc.c x + soc.d   for each soc
    """

    n: int
    q: np.ndarray
    p_mat: np.ndarray | None = None
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    a_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    socs: list = field(default_factory=list)
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        if self.q.size != self.n:
            raise ValueError("objective dimension mismatch")
        if self.p_mat is not None:
            self.p_mat = np.asarray(self.p_mat, dtype=float)
            if self.p_mat.shape != (self.n, self.n):
                raise ValueError("quadratic term dimension mismatch")
        for name in ("a_eq", "a_in"):
            mat = getattr(self, name)
            if mat is not None:
                mat = np.atleast_2d(np.asarray(mat, dtype=float))
                if mat.shape[1] != self.n:
                    raise ValueError(f"{name} column count != n")
                setattr(self, name, mat)
        if (self.a_eq is None) != (self.b_eq is None):
            raise ValueError("a_eq and b_eq must be given together")
        if (self.a_in is None) != (self.b_in is None):
            raise ValueError("a_in and b_in must be given together")
        if self.b_eq is not None:
            self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
            if self.b_eq.size != self.a_eq.shape[0]:
                raise ValueError("equality rhs dimension mismatch")
        if self.b_in is not None:
            self.b_in = np.asarray(self.b_in, dtype=float).ravel()
            if self.b_in.size != self.a_in.shape[0]:
                raise ValueError("inequality rhs dimension mismatch")
        socs = []
        for s in self.socs:
            a_mat = np.atleast_2d(np.asarray(s.a_mat, dtype=float))
            b = np.asarray(s.b, dtype=float).ravel()
            c = np.asarray(s.c, dtype=float).ravel()
            if a_mat.shape[1] != self.n or c.size != self.n or b.size != a_mat.shape[0]:
                raise ValueError("soc constraint dimension mismatch")
            socs.append(SocConstraint(a_mat, b, c, float(s.d)))
        self.socs = socs

    def objective(self, x: np.ndarray) -> float:
        val = float(self.q @ x)
        if self.p_mat is not None:
            val += 0.5 * float(x @ self.p_mat @ x)
        return val

    def max_violation(self, x: np.ndarray) -> float:
        """Worst constraint violation at x (0 if feasible)."""
        v = 0.0
        if self.a_eq is not None:
            v = max(v, float(np.max(np.abs(self.a_eq @ x - self.b_eq), initial=0.0)))
        if self.a_in is not None:
            v = max(v, float(np.max(self.a_in @ x - self.b_in, initial=0.0)))
        if self.lb is not None:
            v = max(v, float(np.max(self.lb - x, initial=0.0)))
        if self.ub is not None:
            v = max(v, float(np.max(x - self.ub, initial=0.0)))
        for s in self.socs:
            v = max(v, float(np.linalg.norm(s.a_mat @ x + s.b) - (s.c @ x + s.d)))
        return v


@dataclass
class ConicSolution:
    x: np.ndarray
    status: str  # optimal | infeasible | unbounded | iteration_limit | unknown
    objective: float
    kkt_residual: float
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def _stack_linear(p: ConicProblem):
    """Linear inequality rows G x <= h from a_in plus finite box bounds."""
    rows = []
    rhs = []
    if p.a_in is not None:
        rows.append(p.a_in)
        rhs.append(p.b_in)
    eye = np.eye(p.n)
    if p.ub is not None:
        ub = np.asarray(p.ub, dtype=float).ravel()
        mask = np.isfinite(ub)
        if mask.any():
            rows.append(eye[mask])
            rhs.append(ub[mask])
    if p.lb is not None:
        lb = np.asarray(p.lb, dtype=float).ravel()
        mask = np.isfinite(lb)
        if mask.any():
            rows.append(-eye[mask])
            rhs.append(-lb[mask])
    if rows:
        return np.vstack(rows), np.concatenate(rhs)
    return np.zeros((0, p.n)), np.zeros(0)


def _solve_equality_qp(p: ConicProblem) -> ConicSolution:
    """Closed-form path: quadratic objective with only equality constraints."""
    if p.p_mat is None:
        raise ConicError("linear objective with no inequalities or cones is unbounded")
    m = 0 if p.a_eq is None else p.a_eq.shape[0]
    kkt = np.zeros((p.n + m, p.n + m))
    kkt[: p.n, : p.n] = p.p_mat
    rhs = np.concatenate([-p.q, np.zeros(m)])
    if m:
        kkt[: p.n, p.n:] = p.a_eq.T
        kkt[p.n:, : p.n] = p.a_eq
        rhs[p.n:] = p.b_eq
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    x = sol[: p.n]
    res = p.max_violation(x)
    grad = p.p_mat @ x + p.q
    if m:
        grad = grad + p.a_eq.T @ sol[p.n:]
    res = max(res, float(np.max(np.abs(grad), initial=0.0)))
    return ConicSolution(x=x, status="optimal", objective=p.objective(x),
                         kkt_residual=res)


def solve_conic(p: ConicProblem) -> ConicSolution:
    """Solve a ConicProblem with a primal-dual interior point method.

    Returns the solution with an explicitly recomputed KKT residual; a
    reported status of "optimal" means that residual passed the internal
    acceptance threshold even if the solver stalled near the optimum.
    """
    g_lin, h_lin = _stack_linear(p)
    soc_sizes = [s.a_mat.shape[0] + 1 for s in p.socs]
    if g_lin.shape[0] == 0 and not p.socs:
        return _solve_equality_qp(p)

    g_blocks = [g_lin]
    h_blocks = [h_lin]
    for s in p.socs:
        g_blocks.append(np.vstack([-s.c[None, :], -s.a_mat]))
        h_blocks.append(np.concatenate([[s.d], s.b]))
    g_all = np.vstack(g_blocks)
    h_all = np.concatenate(h_blocks)

    dims = {"l": g_lin.shape[0], "q": soc_sizes, "s": []}
    G = cvxopt.matrix(g_all)
    h = cvxopt.matrix(h_all)
    A = cvxopt.matrix(p.a_eq) if p.a_eq is not None and p.a_eq.shape[0] else None
    b = cvxopt.matrix(p.b_eq) if A is not None else None

    def run(options):
        saved = dict(cvxopt.solvers.options)
        cvxopt.solvers.options.update(options)
        try:
            if p.p_mat is not None and np.any(p.p_mat):
                return cvxopt.solvers.coneqp(
                    cvxopt.matrix(p.p_mat), cvxopt.matrix(p.q), G, h, dims, A, b)
            return cvxopt.solvers.conelp(cvxopt.matrix(p.q), G, h, dims, A, b)
        finally:
            cvxopt.solvers.options.clear()
            cvxopt.solvers.options.update(saved)

    try:
        out = run(_OPTIONS)
    except (ValueError, ZeroDivisionError, ArithmeticError):
        # interior-point scaling breakdown: retry once at looser tolerances
        relaxed = dict(_OPTIONS, abstol=1e-8, reltol=1e-8, feastol=1e-8,
                       refinement=3)
        try:
            out = run(relaxed)
        except (ValueError, ZeroDivisionError, ArithmeticError) as exc:
            raise ConicError(f"conic solver failure: {exc}") from exc

    status = out["status"]
    if status == "primal infeasible":
        return ConicSolution(x=np.full(p.n, np.nan), status="infeasible",
                             objective=np.nan, kkt_residual=np.inf,
                             iterations=out.get("iterations", 0))
    if status == "dual infeasible":
        return ConicSolution(x=np.full(p.n, np.nan), status="unbounded",
                             objective=-np.inf, kkt_residual=np.inf,
                             iterations=out.get("iterations", 0))
    if out["x"] is None:
        raise ConicError(f"conic solver returned no iterate (status={status})")

    x = np.array(out["x"]).ravel()
    z = np.array(out["z"]).ravel() if out.get("z") is not None else np.zeros(g_all.shape[0])
    y = np.array(out["y"]).ravel() if out.get("y") is not None else np.zeros(0)

    # Recompute KKT residuals: stationarity, primal feasibility, gap.
    grad = p.q.copy()
    if p.p_mat is not None:
        grad = grad + p.p_mat @ x
    stat = grad + g_all.T @ z
    if p.a_eq is not None and y.size:
        stat = stat + p.a_eq.T @ y
    scale = max(1.0, float(np.max(np.abs(p.q), initial=0.0)))
    stationarity = float(np.max(np.abs(stat))) / scale
    primal = p.max_violation(x)
    s_vec = h_all - g_all @ x
    gap = abs(float(s_vec @ z)) / max(1.0, abs(p.objective(x)))
    residual = max(stationarity, primal, gap)

    if status == "optimal" or residual <= 1e-8:
        final_status = "optimal"
    elif out.get("iterations", 0) >= _OPTIONS["maxiters"]:
        final_status = "iteration_limit"
    else:
        final_status = "unknown"
    return ConicSolution(x=x, status=final_status, objective=p.objective(x),
                         kkt_residual=residual,
                         iterations=out.get("iterations", 0))
