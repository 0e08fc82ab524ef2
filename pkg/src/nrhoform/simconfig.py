"""Scenario configuration: noise profiles, agent/formation setup, and the
TOML config format used by the batch entry points."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, asdict, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .navigation import NavigationParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseProfile:
    """Execution-error, outage, impulse-bit and radiation-pressure settings."""

    name: str
    fixed_magnitude_mms: float
    proportional_magnitude_frac: float
    fixed_pointing_mms: float
    proportional_pointing_rad: float
    mme_rate: float
    min_impulse_bit_mms: float
    srp_accel_mms2: float
    srp_dispersion_frac: float
    t_co_max_days: float = 3.0
    t_co_min_days: float = 1.0
    d_min_m: float = 100.0


QUIET = NoiseProfile(
    name="quiet",
    fixed_magnitude_mms=0.01,
    proportional_magnitude_frac=0.001,
    fixed_pointing_mms=0.01,
    proportional_pointing_rad=0.001,
    mme_rate=0.01,
    min_impulse_bit_mms=0.01,
    srp_accel_mms2=1e-5,
    srp_dispersion_frac=0.05,
)

NOISY = NoiseProfile(
    name="noisy",
    fixed_magnitude_mms=0.3,
    proportional_magnitude_frac=0.01,
    fixed_pointing_mms=0.3,
    proportional_pointing_rad=0.01,
    mme_rate=0.05,
    min_impulse_bit_mms=1.0,
    srp_accel_mms2=5e-5,
    srp_dispersion_frac=0.20,
)

NOISE_PROFILES = {"quiet": QUIET, "noisy": NOISY}


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce one simulation campaign."""

    name: str = "scenario"
    n_agents: int = 2
    architecture: str = "fully_connected"
    hub: int | None = None
    separation_km: float = 10.0
    phases_deg: tuple | None = None
    n_revs: int = 10
    n_trials: int = 5
    seed: int = 0
    n_rel_per_rev: int = 3
    provider: str = "kepler"
    noise: NoiseProfile = QUIET
    nav: NavigationParams = NavigationParams()
    epoch0_s: float = 0.0
    qpro_window_revs: int = 12
    qpro_candidate_revs: tuple = (12,)
    reference_margin_revs: int = 7
    grid_per_rev: int = 200
    target_revs_downstream: int = 6
    epsilon_km: float = 25.0
    trust_region_cm_s: float = 1.0
    abs_dv_floor_cms: float = 0.15
    moon_eccentricity: float = 0.0549
    process_noise_accel_mms2: float = 5e-7
    common_process_noise_mms2: float = 6e-5
    rel_noise_accel_mms2: float | None = None  # default: SRP dispersion scale
    truth_tol: float = 1e-11
    nav_tol: float = 1e-9
    scp_tol: float = 1e-10
    reference_tol: float = 1e-12

    def __post_init__(self):
        if self.n_agents < 2:
            raise ConfigError("need at least 2 agents")
        if self.n_revs < 2:
            raise ConfigError("need at least 2 revolutions")
        if self.n_trials < 1:
            raise ConfigError("need at least 1 trial")
        if self.architecture not in ("cluster", "fully_connected", "hub_spoke"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.architecture in ("cluster", "hub_spoke") and self.hub is None:
            object.__setattr__(self, "hub", 0)
        if not self.provider.startswith("table:") and self.provider not in (
                "circular", "kepler"):
            raise ConfigError(f"unknown provider {self.provider!r}")
        if self.phases_deg is not None and len(self.phases_deg) != self.n_agents:
            raise ConfigError("phases_deg length must equal the agent count")

    @property
    def rel_accel_mms2(self) -> float:
        if self.rel_noise_accel_mms2 is not None:
            return self.rel_noise_accel_mms2
        return 2.0 * self.noise.srp_accel_mms2 * self.noise.srp_dispersion_frac

    def canonical_dict(self) -> dict:
        d = asdict(self)
        d["noise"] = asdict(self.noise)
        d["nav"] = asdict(self.nav)
        if d["phases_deg"] is not None:
            d["phases_deg"] = list(d["phases_deg"])
        d["qpro_candidate_revs"] = list(d["qpro_candidate_revs"])
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical_dict(), sort_keys=True,
                          separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def reference_hash(self) -> str:
        """Hash over only the fields that shape the reference trajectory."""
        keys = {"provider": self.provider, "n_revs": self.n_revs,
                "margin": self.reference_margin_revs, "epoch0_s": self.epoch0_s,
                "ecc": self.moon_eccentricity,
                "srp": self.noise.srp_accel_mms2,
                "tol": self.reference_tol}
        blob = json.dumps(keys, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _require(table: dict, key: str, path: str):
    if key not in table:
        raise ConfigError(f"missing config field: {path}.{key}")
    return table[key]


def load_config(path) -> ScenarioConfig:
    """Parse a scenario TOML file; raises ConfigError naming the bad field."""
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if "scenario" not in raw:
        raise ConfigError("missing config section: scenario")
    sc = raw["scenario"]

    noise_name = sc.get("noise", "quiet")
    if noise_name not in NOISE_PROFILES:
        raise ConfigError(f"scenario.noise must be one of {list(NOISE_PROFILES)}")
    noise = NOISE_PROFILES[noise_name]
    if "noise_overrides" in raw:
        try:
            noise = replace(noise, **raw["noise_overrides"])
        except TypeError as exc:
            raise ConfigError(f"noise_overrides: {exc}") from exc
    nav = NavigationParams()
    if "navigation" in raw:
        try:
            nav = replace(nav, **raw["navigation"])
        except TypeError as exc:
            raise ConfigError(f"navigation: {exc}") from exc

    kwargs = dict(
        name=raw.get("name", "scenario"),
        n_agents=int(_require(sc, "agents", "scenario")),
        architecture=_require(sc, "architecture", "scenario"),
        hub=sc.get("hub"),
        separation_km=float(_require(sc, "separation_km", "scenario")),
        n_revs=int(_require(sc, "n_revs", "scenario")),
        n_trials=int(sc.get("n_trials", 1)),
        seed=int(sc.get("seed", 0)),
        n_rel_per_rev=int(sc.get("n_rel_per_rev", 3)),
        provider=sc.get("provider", "kepler"),
        noise=noise,
        nav=nav,
        phases_deg=tuple(sc["phases_deg"]) if "phases_deg" in sc else None,
    )
    if "advanced" in raw:
        adv = dict(raw["advanced"])
        allowed = {f for f in ScenarioConfig.__dataclass_fields__}
        for key, val in adv.items():
            if key not in allowed:
                raise ConfigError(f"advanced.{key}: unknown field")
            kwargs[key] = tuple(val) if isinstance(val, list) else val
    try:
        return ScenarioConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
