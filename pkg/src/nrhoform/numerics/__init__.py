"""Numerical kernels: adaptive integration, dense eigendecomposition,
and a small conic program solver shared by the control stack."""

from .integrate import IntegratorSpec, IntegrationError, Trajectory, integrate
from .eigen import EigenDecomposition, EigenError, eig
from .conic import (
    ConicProblem,
    ConicSolution,
    SocConstraint,
    ConicError,
    solve_conic,
)

__all__ = [
    "IntegratorSpec",
    "IntegrationError",
    "Trajectory",
    "integrate",
    "EigenDecomposition",
    "EigenError",
    "eig",
    "ConicProblem",
    "ConicSolution",
    "SocConstraint",
    "ConicError",
    "solve_conic",
]
