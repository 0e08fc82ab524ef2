"""Adaptive high-order initial value problem integration with dense output.

Thin wrapper around scipy's DOP853 (embedded Runge-Kutta 8(5,3)) that pins
the defaults used throughout the package: tight tolerances suitable for
perilune passages, dense output for event refinement, and explicit errors
instead of silent partial solutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp


class IntegrationError(RuntimeError):
    """Integration failed: step-size underflow or non-finite derivative."""


@dataclass(frozen=True)
class IntegratorSpec:
    """Tolerance and output settings for the adaptive integrator."""

    rel_tol: float = 1e-12
    abs_tol: float = 1e-12
    max_step: float = np.inf
    dense_output: bool = True

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0 and self.max_step > 0):
            raise ValueError("integrator tolerances and max_step must be positive")


DEFAULT_SPEC = IntegratorSpec()


@dataclass
class Trajectory:
    """Sampled solution of an initial value problem.

    ``t`` and ``y`` hold the accepted sample times and states (rows are
    times).  ``sol`` is the scipy dense-output interpolant when requested,
    supporting evaluation at arbitrary times inside the span.
    """

    t: np.ndarray
    y: np.ndarray
    sol: object | None
    t_events: list | None = None
    y_events: list | None = None

    @property
    def y_end(self) -> np.ndarray:
        return self.y[-1]

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    def __call__(self, t):
        if self.sol is None:
            raise ValueError("trajectory was integrated without dense output")
        out = self.sol(t)
        return out.T if np.ndim(t) else out


def integrate(dynamics, x0, t0, tf, spec: IntegratorSpec = DEFAULT_SPEC,
              t_eval=None, events=None) -> Trajectory:
    """Integrate ``dx/dt = dynamics(t, x)`` from t0 to tf (either direction).

    Raises IntegrationError if the derivative is non-finite at the initial
    state or the integrator cannot satisfy the tolerances (e.g. collision
    with a primary body driving the step size to zero).
    """
    x0 = np.asarray(x0, dtype=float)
    if t0 == tf:
        y = x0[None, :].copy()
        return Trajectory(t=np.array([t0], dtype=float), y=y, sol=None)
    f0 = np.asarray(dynamics(t0, x0), dtype=float)
    if not np.all(np.isfinite(f0)):
        raise IntegrationError(f"non-finite derivative at initial state, t={t0}")

    result = solve_ivp(
        dynamics,
        (t0, tf),
        x0,
        method="DOP853",
        rtol=spec.rel_tol,
        atol=spec.abs_tol,
        max_step=spec.max_step,
        dense_output=spec.dense_output,
        t_eval=t_eval,
        events=events,
    )
    if result.status == -1 or not result.success and result.status != 1:
        raise IntegrationError(f"integration failed: {result.message}")
    if not np.all(np.isfinite(result.y)):
        raise IntegrationError("non-finite state encountered during integration")
    return Trajectory(
        t=result.t,
        y=result.y.T.copy(),
        sol=result.sol if spec.dense_output else None,
        t_events=list(result.t_events) if events is not None else None,
        y_events=list(result.y_events) if events is not None else None,
    )
