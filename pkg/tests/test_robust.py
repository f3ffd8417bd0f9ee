import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TWO_BUS_PLAN_8, two_bus
from gridstate.estimation import EstimationProblem, multistart, objective_terms, observable
from gridstate.measurements import measure
from gridstate.network import load_case, solve_power_flow
from gridstate.noise import inject_faults
from gridstate.robust import (
    RobustOptions,
    budget_for,
    enumerate_oracle,
    selection_units,
    solve_lasso,
    solve_robust,
)

# measurement pool for random small instances on the two-bus network
POOL = [("vm", 0), ("vm", 1), ("p", 0), ("p", 1), ("q", 0), ("q", 1), ("pf", 0), ("qf", 0),
        ("pt", 0), ("qt", 0), ("pmu_v", 1), ("pmu_if", 0), ("pmu_i", 1)]


def random_instance(k, p_f=0.2):
    """Random two-bus instance with at most 12 selection variables."""
    net = load_case("case2")
    v = solve_power_flow(net)
    rng = np.random.default_rng(k)
    L = int(rng.integers(6, 13))
    plan = [POOL[i] for i in sorted(rng.choice(len(POOL), L, replace=False))]
    prob = EstimationProblem(net, inject_faults(measure(v, net, plan), p_f, k))
    total = int(np.where(prob.is_pmu, 2, 1).sum())
    mode = "eq" if k % 2 == 0 else "ge"
    return prob, int(rng.integers(4, total)), mode


@pytest.mark.parametrize("k", [8, 12, 13, 14])
def test_matches_enumeration(k):
    prob, d, mode = random_instance(k)
    opts = RobustOptions(budget_mode=mode, max_nodes=10**6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = solve_robust(prob, d, opts)
        b = enumerate_oracle(prob, d, opts)
    assert a.mask.selected == b.mask.selected
    assert a.cost == pytest.approx(b.cost, abs=1e-6)
    assert a.complete and a.bound_gap == 0


def test_budget_respected():
    net, v, prob = two_bus(TWO_BUS_PLAN_8)
    prob = prob.with_measurements(inject_faults(prob.ms, 0.3, 1))
    eq = solve_robust(prob, 6, RobustOptions(budget_mode="eq"))
    assert eq.mask.weight == 6 and sum(eq.mask.selected) == 6
    ge = solve_robust(prob, 6, RobustOptions(budget_mode="ge"))
    assert ge.mask.weight >= 6
    assert ge.cost <= eq.cost + 1e-9 or ge.mask.weight > 6


def test_full_budget_is_plain_estimation():
    net, v, prob = two_bus()
    res = solve_robust(prob, prob.ms.size)
    assert all(res.mask.selected)
    assert res.cost < 1e-8
    assert np.abs(res.state - v).max() < 1e-4


def test_faulty_entry_is_dropped():
    net, v, prob = two_bus(TWO_BUS_PLAN_8)
    vals = prob.ms.values().copy()
    vals[2] += 5.0  # gross error on q2
    bad = prob.with_measurements(prob.ms.with_values(vals, np.arange(8) == 2))
    res = solve_robust(bad, 7)
    assert not res.mask.selected[2]
    assert res.cost < 1e-8
    assert np.abs(res.state - v).max() < 1e-4


def test_budget_validation():
    net, v, prob = two_bus()
    with pytest.raises(ValueError):
        solve_robust(prob, 0)
    with pytest.raises(ValueError):
        solve_robust(prob, prob.ms.size + 1)
    pmu_only = EstimationProblem(net, measure(v, net, [("pmu_v", 0), ("pmu_v", 1)]))
    with pytest.raises(ValueError, match="exactly"):
        solve_robust(pmu_only, 3)
    with pytest.raises(ValueError):
        RobustOptions(budget_mode="le")


def test_small_budget_warns_about_observability():
    net, v, prob = two_bus(TWO_BUS_PLAN_8)
    with pytest.warns(RuntimeWarning, match="observable"):
        solve_robust(prob, 3)


def test_node_limit_reports_incomplete_search():
    prob, d, mode = random_instance(15)
    res = solve_robust(prob, d, RobustOptions(budget_mode=mode, max_nodes=3))
    assert not res.complete
    assert res.bound_gap >= 0
    assert res.nodes_explored <= 3


def test_budget_for_floor():
    net, v, prob = two_bus(TWO_BUS_PLAN_8)
    assert budget_for(prob, 0.9) == 7
    assert budget_for(prob, 1.0) == 8


def test_grouped_units_follow_devices():
    net = load_case("case14")
    v = solve_power_flow(net)
    prob = EstimationProblem(net, measure(v, net, ["vm", "p", "q", "pf", "qf", "pt"]))
    units = selection_units(prob, grouped=True)
    assert len(units) == net.n + 2 * net.m
    assert sorted(j for u in units for j in u) == list(range(len(prob.ms)))
    assert len(selection_units(prob)) == len(prob.ms)


def test_pmu_entries_weigh_two():
    net, v, _ = two_bus()
    prob = EstimationProblem(net, measure(v, net, [("vm", 0), ("pmu_v", 1), ("p", 1), ("q", 1),
                                                   ("pmu_if", 0)]))
    res = solve_robust(prob, 5)
    assert res.mask.weight == 5
    assert res.mask.beta.dtype == bool and len(res.mask.beta) == 2 and len(res.mask.gamma) == 3


@settings(max_examples=10, deadline=None)
@given(st.floats(0.01, 10.0))
def test_lasso_threshold_rule(r):
    net = load_case("case14")
    v = solve_power_flow(net)
    prob = EstimationProblem(net, inject_faults(measure(v, net, ["vm", "p", "q"]), 0.1, 3))
    res = solve_lasso(prob, r)
    terms = objective_terms(res.state, prob)
    c = np.where(prob.is_pmu, 2.0, 1.0)
    if res.converged:
        assert np.array_equal(res.selection, np.where(terms >= r * c, 0.0, 1.0))
    assert res.objective == pytest.approx(res.cost + r * float(c @ (1 - res.selection)))


def test_lasso_drops_gross_errors():
    net, v, prob = two_bus(TWO_BUS_PLAN_8)
    vals = prob.ms.values().copy()
    vals[3] += 3.0
    bad = prob.with_measurements(prob.ms.with_values(vals, np.arange(8) == 3))
    res = solve_lasso(bad, 0.5, init=multistart(bad, 8).state)
    assert res.selection[3] == 0
    with pytest.raises(ValueError):
        solve_lasso(bad, 0.0)


def test_unobservable_selections_are_skipped():
    # noiseless: every 3-entry selection fits exactly, and the lexicographic
    # tie break would pick {q0, pf0, qf0}, where q0 repeats qf0
    net, v, prob = two_bus(TWO_BUS_PLAN_8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        loose = solve_robust(prob, 3, RobustOptions(require_observable=False))
        strict = solve_robust(prob, 3)
    assert loose.mask.to_list() == [0, 0, 0, 0, 0, 1, 1, 1]
    assert not observable(prob.with_selection(np.array(loose.mask.selected, float)), loose.state)
    assert observable(prob.with_selection(np.array(strict.mask.selected, float)), strict.state)
    assert np.abs(strict.state - v).max() < 1e-4
