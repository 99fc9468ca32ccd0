"""Solver layer: model container, both backends, feasibility audit and
MPS serialization."""

import numpy as np
import pytest

from emdispatch import milp
from _mip_reference import brute_force_optimum, crafted_models, random_model


def small_lp():
    m = milp.MilpModel("lp")
    x = m.add_var("x", 0.0, 10.0)
    y = m.add_var("y", 0.0, 10.0)
    m.set_objective({x: -1.0, y: -2.0})
    m.add_constraint("cap", {x: 1.0, y: 1.0}, "<=", 6.0)
    m.add_constraint("mix", {x: 1.0, y: -1.0}, ">=", -4.0)
    return m


def test_model_container_guards():
    m = milp.MilpModel()
    m.add_var("x")
    with pytest.raises(ValueError):
        m.add_var("x")
    with pytest.raises(ValueError):
        m.add_var("y", kind="semicontinuous")
    with pytest.raises(ValueError):
        m.add_constraint("c", {"missing": 1.0}, "<=", 0.0)
    with pytest.raises(ValueError):
        m.add_constraint("c", {"x": 1.0}, "<<", 0.0)
    with pytest.raises(ValueError):
        m.set_objective({"nope": 1.0})


def test_lp_agrees_across_backends():
    m = small_lp()
    for backend in ("embedded", "highs"):
        sol = milp.solve(m, milp.SolveOptions(backend=backend))
        assert sol.status == "optimal"
        # optimum at the cap/mix vertex x=1, y=5
        assert sol.objective == pytest.approx(-11.0, abs=1e-7)
        assert sol["x"] == pytest.approx(1.0, abs=1e-6)
        assert sol["y"] == pytest.approx(5.0, abs=1e-6)


def test_binary_model_agrees_across_backends():
    m = crafted_models()[0]        # knapsack
    ref, _ = brute_force_optimum(m)
    for backend in ("embedded", "highs"):
        sol = milp.solve(m, milp.SolveOptions(gap=1e-9, backend=backend))
        assert sol.status == "optimal"
        assert sol.objective == pytest.approx(ref, abs=1e-7)


def test_infeasible_detected_by_both_backends():
    m = crafted_models()[-1]
    for backend in ("embedded", "highs"):
        assert milp.solve(m, milp.SolveOptions(backend=backend)).status \
            == "infeasible"


def test_embedded_matches_enumeration_on_random_models():
    rng = np.random.default_rng(777)
    solved = 0
    for idx in range(8):
        m = random_model(rng, idx, max_binaries=9)
        ref, assignment = brute_force_optimum(m)
        sol = milp.solve(m, milp.SolveOptions(gap=1e-9, backend="embedded"))
        if ref is None:
            assert sol.status == "infeasible", m.name
            continue
        assert sol.status == "optimal", m.name
        assert sol.objective == pytest.approx(ref, abs=1e-6), m.name
        report = milp.check_feasibility(m, sol.values)
        assert report.ok, report.worst_constraint
        solved += 1
    assert solved >= 4      # the seed yields a healthy mix


def test_check_feasibility_reports_violations():
    m = small_lp()
    report = milp.check_feasibility(m, {"x": 5.0, "y": 5.0})
    assert not report.ok
    assert report.worst_constraint == "cap"
    assert report.max_violation == pytest.approx(4.0, abs=1e-12)
    assert "cap" in report.failures()
    with pytest.raises(KeyError):
        milp.check_feasibility(m, {"x": 0.0})


def test_mps_round_trip_bytes(tmp_path):
    for m in [small_lp()] + crafted_models():
        p1 = tmp_path / f"{m.name}_1.mps"
        p2 = tmp_path / f"{m.name}_2.mps"
        milp.export_mps(m, str(p1))
        again = milp.import_mps(str(p1))
        milp.export_mps(again, str(p2))
        assert p1.read_bytes() == p2.read_bytes(), m.name
        assert again.n_vars == m.n_vars
        assert again.n_binaries == m.n_binaries


def test_mps_preserves_solutions(tmp_path):
    m = crafted_models()[3]        # binaries + continuous + equality row
    path = tmp_path / "m.mps"
    milp.export_mps(m, str(path))
    again = milp.import_mps(str(path))
    a = milp.solve(m, milp.SolveOptions(gap=1e-9, backend="embedded"))
    b = milp.solve(again, milp.SolveOptions(gap=1e-9, backend="embedded"))
    assert a.objective == pytest.approx(b.objective, abs=1e-9)


def test_gap_and_time_limit_options():
    m = crafted_models()[1]        # assignment
    sol = milp.solve(m, milp.SolveOptions(gap=0.5, backend="embedded"))
    assert sol.status in ("optimal", "feasible-gap")
    assert sol.gap <= 0.5 + 1e-9
    with pytest.raises(ValueError):
        milp.solve(m, milp.SolveOptions(backend="cplex"))
