"""Physical constants and Earth-Moon normalization.

All dynamics work in nondimensional units: lengths scaled by the mean
Earth-Moon distance LU, times scaled by TU so the mean motion of the
Earth-Moon line is exactly 1.  The defaults below use standard GM values;
everything downstream derives from this one record, so alternate constant
sets can be swapped in through configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

# Gravitational parameters, km^3/s^2 (DE440 convention)
GM_EARTH = 398600.435507
GM_MOON = 4902.800118
GM_SUN = 1.32712440041279e11

EARTH_MOON_DISTANCE_KM = 384400.0
ASTRONOMICAL_UNIT_KM = 1.495978707e8

REFERENCE_EPOCH_TDB = "2024-10-29 12:00:00 TDB"  # maps to t = 0


@dataclass(frozen=True)
class EarthMoonSystem:
    """Normalization constants for the Earth-Moon rotating frame."""

    gm_earth: float = GM_EARTH
    gm_moon: float = GM_MOON
    gm_sun: float = GM_SUN
    lu_km: float = EARTH_MOON_DISTANCE_KM
    au_km: float = ASTRONOMICAL_UNIT_KM

    @property
    def gm_total(self) -> float:
        return self.gm_earth + self.gm_moon

    @property
    def mu(self) -> float:
        """Mass ratio of the smaller primary."""
        return self.gm_moon / self.gm_total

    @property
    def tu_s(self) -> float:
        """Time unit: 1/TU is the Earth-Moon mean motion in rad/s."""
        return math.sqrt(self.lu_km**3 / self.gm_total)

    @property
    def vu_kms(self) -> float:
        return self.lu_km / self.tu_s

    @property
    def sun_mean_motion(self) -> float:
        """Mean motion of the Sun about the Earth-Moon barycenter, normalized."""
        n_sun = math.sqrt((self.gm_sun + self.gm_total) / self.au_km**3)
        return n_sun * self.tu_s

    @property
    def synodic_period(self) -> float:
        """Synodic month in normalized time units."""
        return 2.0 * math.pi / (1.0 - self.sun_mean_motion)

    @property
    def resonant_period_9_2(self) -> float:
        """Orbit period completing 9 revolutions per 2 synodic months."""
        return 2.0 * self.synodic_period / 9.0

    def to_dict(self) -> dict:
        return {
            "gm_earth": self.gm_earth,
            "gm_moon": self.gm_moon,
            "gm_sun": self.gm_sun,
            "lu_km": self.lu_km,
            "au_km": self.au_km,
        }


DEFAULT_SYSTEM = EarthMoonSystem()

SECONDS_PER_DAY = 86400.0
SECONDS_PER_YEAR = 365.25 * SECONDS_PER_DAY
