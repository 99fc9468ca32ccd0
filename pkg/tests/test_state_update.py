"""Matrix-form state recursions against their iterative references."""

import numpy as np
import pytest

from emdispatch import state_update as su


def test_soc_matrix_matches_iteration(bundles, rng):
    b = bundles["ev"]
    mats = su.build_soc_matrices(b, 96, 2000, b.cell_capacity_ah)
    for _ in range(50):
        soc0 = rng.uniform(0.0, 1.0)
        p = rng.uniform(-40000.0, 40000.0, size=96)
        ref = su.iterate_soc(b, soc0, p, 2000, b.cell_capacity_ah)
        assert np.max(np.abs(mats.trajectory(soc0, p) - ref)) < 1e-12


def test_temp_matrix_matches_iteration(bundles, rng):
    b = bundles["bss"]
    mats = su.build_temp_matrices(b, 96, 3000)
    for _ in range(50):
        th0 = rng.uniform(10.0, 40.0)
        pd = rng.uniform(0.0, 30000.0, size=96)
        pc = rng.uniform(-30000.0, 0.0, size=96)
        ref = su.iterate_temp(b, th0, pd, pc, 3000)
        assert np.max(np.abs(mats.trajectory(th0, pd, pc) - ref)) < 1e-12


def test_zero_power_closed_form(bundles):
    b = bundles["es"]
    a0, a1 = b.power.a0, b.power.a1
    dt_h = b.dt_decision_s / 3600.0
    chi = 1.0 - a1 * dt_h / b.cell_capacity_ah
    mats = su.build_soc_matrices(b, 12, 100, b.cell_capacity_ah)
    traj = mats.trajectory(0.6, np.zeros(12))
    # soc_t = chi^t soc0 - (a0 dt / C) * (chi^(t-1) + ... + 1)
    drift = a0 * dt_h / b.cell_capacity_ah
    expect = [0.6]
    for _ in range(12):
        expect.append(chi * expect[-1] - drift)
    assert np.allclose(traj, expect[1:], atol=1e-12)


def test_matrix_builders_reject_bad_arguments(bundles):
    b = bundles["ev"]
    with pytest.raises(ValueError):
        su.build_soc_matrices(b, 0, 100, b.cell_capacity_ah)
    with pytest.raises(ValueError):
        su.build_soc_matrices(b, 10, 100, 0.0)
    with pytest.raises(ValueError):
        su.build_temp_matrices(b, 10, 0)


def test_matrix_shapes(bundles):
    b = bundles["ev"]
    mats = su.build_soc_matrices(b, 24, 500, b.cell_capacity_ah)
    assert mats.A.shape == (24,)
    assert mats.B_P.shape == (24, 24)
    assert np.allclose(mats.B_P, np.tril(mats.B_P))
    assert mats.B_CS.shape == (24,)
    tm = su.build_temp_matrices(b, 24, 500)
    assert tm.C.shape == (24,)
    assert np.allclose(tm.D_P_dis, np.tril(tm.D_P_dis))


def test_single_step_horizon(bundles):
    b = bundles["ev"]
    mats = su.build_soc_matrices(b, 1, 100, b.cell_capacity_ah)
    p = np.array([5000.0])
    ref = su.iterate_soc(b, 0.5, p, 100, b.cell_capacity_ah)
    assert mats.trajectory(0.5, p)[0] == pytest.approx(ref[0], abs=1e-14)
