"""Cell engine behavior: OCV tables, aging, stepping, limit checks."""

import numpy as np
import pytest

from emdispatch.emcore import (BatchCellSim, CellParams, OperatingLimits,
                               charge_throughput, energy_throughput, simulate)


@pytest.fixture(params=["ncm", "lfp"])
def params(request):
    return CellParams.by_type(request.param)


def test_ocv_table_monotone(params):
    soc = np.linspace(0.0, 1.0, 101)
    v = params.ocv(soc)
    assert np.all(np.diff(v) >= 0)
    assert v[0] < v[-1]


def test_by_type_rejects_unknown():
    with pytest.raises(ValueError):
        CellParams.by_type("nacl")


def test_aging_fades_capacity_and_grows_resistance(params):
    aged = params.aged(2000)
    assert aged.capacity_ah < params.capacity_ah
    assert aged.resistance_ohm > params.resistance_ohm
    assert aged.film_resistance_ohm > params.film_resistance_ohm
    # fade saturates rather than going negative
    assert params.aged(10 ** 6).capacity_ah >= 0.5 * params.capacity_ah


def test_resistance_decreases_with_temperature(params):
    assert params.resistance(40.0) < params.resistance(25.0) < params.resistance(5.0)


def test_anode_potential_decays_with_stoichiometry(params):
    x = np.linspace(0.05, 0.95, 20)
    pot = params.anode_potential(x)
    assert np.all(np.diff(pot) < 0)
    assert np.all(pot > 0)


def test_discharge_drops_soc_and_voltage():
    p = CellParams.ncm()
    sim = BatchCellSim(p, np.array([0.6]), 25.0, 25.0, 1.0)
    soc0 = sim.soc()[0]
    i = np.array([0.5 * p.capacity_ah])
    for _ in range(600):
        v, eta, phi, heat = sim.step(i)
    assert sim.soc()[0] < soc0
    assert v[0] < p.ocv(sim.surface_soc())[0] + 1e-12
    assert 0.9 < eta[0] < 1.0
    assert heat[0] > 0
    assert sim.heat_j[0] > 0


def test_charge_raises_soc():
    p = CellParams.ncm()
    sim = BatchCellSim(p, np.array([0.4]), 25.0, 25.0, 1.0)
    for _ in range(600):
        sim.step(np.array([-0.5 * p.capacity_ah]))
    assert sim.soc()[0] > 0.4


def test_rest_relaxes_surface_toward_mean():
    p = CellParams.ncm()
    sim = BatchCellSim(p, np.array([0.6]), 25.0, 25.0, 1.0)
    for _ in range(300):
        sim.step(np.array([1.0 * p.capacity_ah]))
    gap_loaded = abs(sim.surface_soc()[0] - sim.soc()[0])
    for _ in range(600):
        sim.step(np.array([0.0]))
    gap_rested = abs(sim.surface_soc()[0] - sim.soc()[0])
    assert gap_rested < 0.1 * gap_loaded


def test_temperature_rises_under_load_and_relaxes():
    p = CellParams.ncm()
    sim = BatchCellSim(p, np.array([0.6]), 25.0, 25.0, 1.0)
    for _ in range(900):
        sim.step(np.array([1.2 * p.capacity_ah]))
    hot = sim.theta[0]
    assert hot > 25.0
    for _ in range(7200):
        sim.step(np.array([0.0]))
    assert sim.theta[0] < hot
    assert sim.theta[0] > 25.0 - 1e-9


def test_batch_matches_independent_runs():
    p = CellParams.lfp()
    sim2 = BatchCellSim(p, np.array([0.3, 0.7]), 25.0, 25.0, 1.0)
    sims = [BatchCellSim(p, np.array([s]), 25.0, 25.0, 1.0) for s in (0.3, 0.7)]
    i = np.array([0.4, -0.4])
    for _ in range(200):
        sim2.step(i)
        sims[0].step(i[:1])
        sims[1].step(i[1:])
    assert sim2.soc()[0] == pytest.approx(sims[0].soc()[0], abs=1e-12)
    assert sim2.soc()[1] == pytest.approx(sims[1].soc()[0], abs=1e-12)
    assert sim2.theta[0] == pytest.approx(sims[0].theta[0], abs=1e-12)


def test_limit_masks_fire_on_overcurrent():
    p = CellParams.ncm()
    limits = OperatingLimits.for_scheme(p, "moderate")
    sim = BatchCellSim(p, np.array([0.5]), 25.0, 25.0, 1.0)
    i = np.array([5.0 * p.capacity_ah])
    v, eta, phi, _ = sim.outputs(i)
    flags = sim.check_limits(limits, i, v, eta, phi)
    assert flags["current"][0]
    assert flags["efficiency"][0]
    calm = np.array([0.1 * p.capacity_ah])
    v, eta, phi, _ = sim.outputs(calm)
    flags = sim.check_limits(limits, calm, v, eta, phi)
    assert not any(m[0] for m in flags.values())


def test_simulate_trace_contents():
    p = CellParams.ncm()
    limits = OperatingLimits.for_scheme(p, "fast")
    current = np.concatenate([np.full(300, 0.8), np.full(300, -0.8)])
    trace = simulate(0.5, 25.0, current, p, 25.0, limits)
    assert trace.n == 600
    for arr in (trace.voltage_v, trace.theta_c, trace.soc, trace.eta,
                trace.phi_se_v, trace.heat_j):
        assert arr.shape == (600,)
        assert np.all(np.isfinite(arr))
    assert not trace.violated()
    assert charge_throughput(trace) == pytest.approx(0.0, abs=1e-12)
    assert trace.final_state.internal_heat_j > 0
    # discharge leg returns less energy than the charge leg stores
    assert energy_throughput(trace) < 0


def test_simulate_rejects_bad_input():
    p = CellParams.ncm()
    limits = OperatingLimits.for_scheme(p)
    with pytest.raises(ValueError):
        simulate(0.5, 25.0, np.array([]), p, 25.0, limits)
    with pytest.raises(ValueError):
        simulate(np.nan, 25.0, np.ones(5), p, 25.0, limits)


def test_scheme_limits():
    p = CellParams.ncm()
    mod = OperatingLimits.for_scheme(p, "moderate")
    fast = OperatingLimits.for_scheme(p, "fast")
    assert mod.eta_min > fast.eta_min
    assert fast.current_max_discharge_a > mod.current_max_discharge_a
    assert mod.fingerprint() != fast.fingerprint()
    with pytest.raises(KeyError):
        OperatingLimits.for_scheme(p, "turbo")


def test_limits_validation():
    p = CellParams.ncm()
    good = OperatingLimits.for_scheme(p)
    import dataclasses
    with pytest.raises(ValueError):
        dataclasses.replace(good, eta_min=1.5)
    with pytest.raises(ValueError):
        dataclasses.replace(good, voltage_min_v=good.voltage_max_v + 1.0)
