"""Cislunar formation-keeping toolkit.

Library layers, bottom to top: numerics (integration, eigen, conic
solves), dynamics and ephemeris providers, periodic-orbit and reference
trajectory generation, quasi-periodic relative orbit construction,
station-keeping control with a passive-safety filter, navigation
filtering, and the Monte Carlo simulation harness.
"""

from .constants import DEFAULT_SYSTEM, EarthMoonSystem

__version__ = "0.1.0"

__all__ = ["DEFAULT_SYSTEM", "EarthMoonSystem", "__version__"]
