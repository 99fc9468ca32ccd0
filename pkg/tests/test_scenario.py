"""Config handling, synthetic day profiles and scenario assembly."""

import copy

import numpy as np
import pytest
import yaml

from emdispatch import scenario as scn_mod
from conftest import make_config


def test_default_config_valid():
    scn_mod.validate_config(copy.deepcopy(scn_mod.DEFAULT_CONFIG))


@pytest.mark.parametrize("patch", [
    {"delta_t_min": 14},                     # coarse step not a multiple
    {"horizon_steps": 95},                   # ragged coarse horizon
    {"grid_interface_efficiency": 0.0},
    {"ev": {"soc_req_departure": 0.9}},      # above the EV window
    {"seed": None},
])
def test_validate_rejects_bad_config(patch):
    with pytest.raises(ValueError):
        scn_mod.validate_config(make_config(**patch))


def test_load_config_merges_nested(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"ev": {"count": 3}, "seed": 7}))
    cfg = scn_mod.load_config(str(path))
    assert cfg["ev"]["count"] == 3
    assert cfg["seed"] == 7
    # untouched sections keep their defaults
    assert cfg["bss"]["dock_count"] == scn_mod.DEFAULT_CONFIG["bss"]["dock_count"]


def test_synthetic_series_deterministic():
    a = scn_mod.generate_synthetic("pv", 42, 96, 15.0, 100.0)
    b = scn_mod.generate_synthetic("pv", 42, 96, 15.0, 100.0)
    c = scn_mod.generate_synthetic("pv", 43, 96, 15.0, 100.0)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert a.values.shape == (96,)
    assert np.all(a.values >= 0)


def test_synthetic_price_levels():
    price = scn_mod.generate_synthetic("price", 1, 96, 15.0)
    assert set(np.round(price.values, 6)) <= {0.06, 0.11, 0.18}
    # night steps are off-peak
    assert price.values[0] == 0.06


def test_synthetic_swap_demand_totals():
    d = scn_mod.generate_synthetic("swap_demand", 5, 96, 15.0, 12)
    assert d.values.sum() == 12
    assert np.all(d.values >= 0)
    assert np.all(d.values == np.round(d.values))
    with pytest.raises(ValueError):
        scn_mod.generate_synthetic("tide", 5, 96, 15.0)


def test_series_rejects_negative_power():
    with pytest.raises(ValueError):
        scn_mod.SeriesData("load", np.array([1.0, -2.0]), "kW", 15.0)


def test_load_series_csv(tmp_path):
    path = tmp_path / "load.csv"
    path.write_text("time,kw\n00:00,1.5\n00:15,2.5\n")
    s = scn_mod.load_series(str(path), "load", "kW", 15.0, expected_len=2)
    assert np.allclose(s.values, [1.5, 2.5])
    with pytest.raises(ValueError):
        scn_mod.load_series(str(path), "load", "kW", 15.0, expected_len=96)


def test_ev_profiles_partition_and_departures():
    cfg = make_config(ev={"count": 10})
    profiles = scn_mod.sample_ev_profiles(cfg, 99)
    assert len(profiles) == 10
    for p in profiles:
        total = p.s_commercial + p.s_residential + p.s_driving
        assert np.all(total == 1)
        assert cfg["ev"]["soc_min"] < p.soc_init < cfg["ev"]["soc_max"]
        for (t, req) in p.departures:
            assert req == cfg["ev"]["soc_req_departure"]
            assert p.s_commercial[t] + p.s_residential[t] == 1
            assert p.s_driving[t + 1] == 1
    again = scn_mod.sample_ev_profiles(cfg, 99)
    assert all(np.array_equal(a.s_driving, b.s_driving)
               for a, b in zip(profiles, again))


def test_pack_cell_count():
    assert scn_mod.pack_cell_count(1.0, 2.0, 5.0) == 100
    assert scn_mod.pack_cell_count(35.0, 1.7572, 3.43) == \
        round(35000.0 / (1.7572 * 3.43))


def test_build_scenario_shapes(tiny_scenario, tiny_config):
    scn = tiny_scenario
    assert scn.T == 96
    assert scn.dt_h == pytest.approx(0.25)
    th = int(scn.dh_min // scn.dt_min)
    assert len(scn.bss.demand_coarse) == scn.T // th
    assert scn.bss.demand_coarse.sum() == tiny_config["bss"]["swaps_per_day"]
    assert scn.ev_n_cells > 0 and scn.bss.n_cells > 0 and scn.es.n_cells > 0
    assert scn.bss.epsilon == tiny_config["bss"]["aggregation"]
    assert len(scn.ev_profiles) == tiny_config["ev"]["count"]
    scn.validate()
