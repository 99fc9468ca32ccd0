"""Shared fixtures: cell parameter sets, fitted characterization bundles
and a small solved dispatch instance reused across test modules.

Characterization is deterministic, so the session-scoped bundles are
fitted once and shared; tests that need to *time* a fresh fit do their
own characterization.
"""

import copy

import numpy as np
import pytest

from emdispatch import lpc, scenario as scn_mod
from emdispatch.emcore import CellParams, OperatingLimits


@pytest.fixture(scope="session")
def cells():
    return {"ncm": CellParams.ncm(), "lfp": CellParams.lfp()}


# (cell type, operating scheme) per asset category, mirroring the default
# configuration
CATEGORY_SETUP = {
    "ev": ("ncm", "moderate"),
    "bss": ("ncm", "fast"),
    "es": ("lfp", "moderate"),
}


@pytest.fixture(scope="session")
def bundles(cells):
    out = {}
    for cat, (cell_type, scheme) in CATEGORY_SETUP.items():
        params = cells[cell_type]
        limits = OperatingLimits.for_scheme(params, scheme)
        out[cat] = lpc.characterize(params, 25.0, limits)
    return out


@pytest.fixture(scope="session")
def bundle_dir(bundles, tmp_path_factory):
    """Bundles saved to disk in the layout the CLI's --bundles flag expects."""
    d = tmp_path_factory.mktemp("bundles")
    for cat, b in bundles.items():
        b.save(str(d / f"bundle_{cat}.json"))
    return str(d)


def make_config(**overrides):
    """Default configuration with per-section overrides merged in."""
    cfg = copy.deepcopy(scn_mod.DEFAULT_CONFIG)
    for key, val in overrides.items():
        if isinstance(val, dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


@pytest.fixture(scope="session")
def tiny_config():
    return make_config(ev={"count": 2},
                       bss={"dock_count": 2, "aggregation": 3,
                            "swaps_per_day": 4})


@pytest.fixture(scope="session")
def tiny_scenario(tiny_config, cells):
    return scn_mod.build_scenario(tiny_config, cells)


@pytest.fixture(scope="session")
def tiny_solution(tiny_scenario, bundles):
    from emdispatch import dispatch
    sol = dispatch.solve_dispatch(tiny_scenario, bundles, "m2",
                                  gap=0.05, time_limit_s=120.0)
    assert sol.status in ("optimal", "feasible")
    return sol


@pytest.fixture(scope="session")
def category_limits(cells):
    return {cat: OperatingLimits.for_scheme(cells[ct], scheme)
            for cat, (ct, scheme) in CATEGORY_SETUP.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
