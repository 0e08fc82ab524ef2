"""Shared fixtures: the 9:2 orbit and ephemeris references are expensive,
so they are built once and cached on disk across test sessions."""

import pickle
from pathlib import Path

import numpy as np
import pytest

from nrhoform.constants import DEFAULT_SYSTEM
from nrhoform.dynamics import HfemModel, HfemParams
from nrhoform.ephemeris import KeplerianProvider
from nrhoform.orbits import find_nrho_9_2, stack_and_converge

CACHE_DIR = Path(__file__).resolve().parent.parent / ".cache"
REFERENCE_REVS = 17


def _load_or_build(name, builder):
    CACHE_DIR.mkdir(exist_ok=True)
    path = CACHE_DIR / f"{name}.pkl"
    if path.exists():
        with open(path, "rb") as fh:
            return pickle.load(fh)
    obj = builder()
    with open(path, "wb") as fh:
        pickle.dump(obj, fh)
    return obj


@pytest.fixture(scope="session")
def system():
    return DEFAULT_SYSTEM


@pytest.fixture(scope="session")
def nrho(system):
    """Corrected 9:2 southern L2 member, phased at apolune."""
    return _load_or_build("nrho_9_2", lambda: find_nrho_9_2(system))


@pytest.fixture(scope="session")
def kepler_reference(system, nrho):
    """17-revolution ephemeris reference (Keplerian Moon + Sun, SRP on)."""

    def build():
        provider = KeplerianProvider(system, ecc=0.0549, include_sun=True)
        params = HfemParams(srp=True, srp_accel_mm_s2=1e-5, reflectivity=1.0)
        model = HfemModel(params, provider, system,
                          cache_span=(-0.5, (REFERENCE_REVS + 1) * nrho.period + 0.5))
        traj = stack_and_converge(nrho, REFERENCE_REVS, 0.0, model)
        return traj

    traj = _load_or_build(f"kepler_reference_{REFERENCE_REVS}", build)
    return traj


@pytest.fixture(scope="session")
def kepler_reference_with_stream(kepler_reference):
    """Same reference with the STM stream built over the full span."""
    if kepler_reference._stream is None:
        from nrhoform.control import flatten_control_epochs, schedule_maneuvers
        schedules = schedule_maneuvers(kepler_reference, 3)
        extra = np.concatenate([flatten_control_epochs(schedules),
                                kepler_reference.perilune_epochs])
        kepler_reference.build_stm_stream(grid_per_rev=200, extra_times=extra)
    return kepler_reference
