import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import polar, two_bus
from gridstate.estimation import (
    EstimationError,
    EstimationProblem,
    WlsOptions,
    estimate_wls,
    flat_start,
    from_coords,
    metrics,
    multistart,
    multistart_starts,
    objective_cost,
    objective_gradient,
    objective_terms,
    to_coords,
)
from gridstate.measurements import measure, pmu_plan, standard_plan
from gridstate.network import load_case, solve_power_flow
from gridstate.noise import add_gaussian_noise
from gridstate.optimize import lbfgs

NET = load_case("case14")
V = solve_power_flow(NET)
MIXED = standard_plan(NET) + pmu_plan(NET, [2, 6]) + [("pmu_i", 3), ("pt", 1), ("qt", 2)]


def mixed_problem(voltage_term="square", seed=0):
    ms = add_gaussian_noise(measure(V, NET, MIXED), seed, scale=0.01)
    weights = {"v_pmu": 2.0, "i_pmu": 1.5, "itf_pmu": 0.7, "pq_scada": 0.5, "v_scada": 3.0}
    return EstimationProblem(NET, ms, weights, voltage_term=voltage_term)


def fd_gradient(prob, x, h=1e-6):
    f = lambda z: objective_cost(from_coords(z, NET.n, NET.reference), prob)
    return np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(len(x))])


def away_from_kink(prob, v, margin=1e-3):
    vm = prob.by_kind["vm"]
    r = np.abs(v[prob.targets[vm]]) ** 2 - prob.values[vm].real ** 2
    return np.abs(r).min() > margin


def test_gradient_matches_finite_differences_random_draws():
    rng = np.random.default_rng(11)
    checked = 0
    for k in range(100):
        prob = mixed_problem("abs" if k % 2 else "square", seed=k)
        v = V * rng.uniform(0.95, 1.05, NET.n) * np.exp(1j * rng.uniform(-0.1, 0.1, NET.n))
        v *= np.exp(-1j * np.angle(v[NET.reference]))  # coordinates carry no reference angle
        if prob.voltage_term == "abs" and not away_from_kink(prob, v):
            continue
        x = to_coords(v, NET.reference)
        g = objective_gradient(v, prob)
        fd = fd_gradient(prob, x)
        assert np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-5
        checked += 1
    assert checked >= 90


def test_objective_terms_nonnegative_and_sum_to_cost():
    prob = mixed_problem()
    v = V * 1.02
    t = objective_terms(v, prob)
    assert t.min() >= 0
    assert objective_cost(v, prob) == pytest.approx(t.sum())


@settings(max_examples=30, deadline=None)
@given(st.floats(-np.pi, np.pi))
def test_scada_cost_invariant_under_global_rotation(phase):
    prob = EstimationProblem(NET, add_gaussian_noise(measure(V, NET, standard_plan(NET)), 1))
    v = V * 1.01
    assert objective_cost(v * np.exp(1j * phase), prob) == pytest.approx(objective_cost(v, prob),
                                                                         rel=1e-10, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=5, max_size=5))
def test_selection_is_linear_in_terms(sel5):
    prob = EstimationProblem(NET, measure(V, NET, standard_plan(NET)))
    sel = np.resize(np.array(sel5), len(prob.ms))
    v = V * 1.03
    assert objective_cost(v, prob, sel) == pytest.approx(sel @ objective_terms(v, prob))


def test_coordinates_round_trip():
    rng = np.random.default_rng(0)
    v = rng.normal(size=NET.n) + 1j * rng.normal(size=NET.n)
    v[NET.reference] = v[NET.reference].real
    assert np.array_equal(from_coords(to_coords(v, NET.reference), NET.n, NET.reference), v)
    assert len(to_coords(v, NET.reference)) == 2 * NET.n - 1


def test_noiseless_recovery(case14):
    net, v, prob = case14
    res = estimate_wls(prob, flat_start(net))
    m = metrics(res.state, v, prob)
    assert res.cost < 1e-6 and m["d2"] < 1e-6 and m["dinf"] < 1e-3
    assert res.state[net.reference].imag == 0


def test_local_minimum_trap_and_global_recovery():
    net, v, prob = two_bus()
    res = estimate_wls(prob, np.array([0.87, polar(0.35, -35.7)]))
    assert res.cost == pytest.approx(0.11183, abs=1e-3)
    best = multistart(prob, 16, seed=0)
    assert best.cost < 1e-8
    assert np.abs(best.state - v).max() < 1e-4


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 1000))
def test_multistart_monotone_in_starts(seed):
    net, v, prob = two_bus()
    noisy = prob.with_measurements(add_gaussian_noise(prob.ms, seed))
    assert multistart(noisy, 16, seed).cost <= multistart(noisy, 4, seed).cost + 1e-12


def test_multistart_prefix_and_thread_independence():
    a = multistart_starts(NET, 4, 5)
    b = multistart_starts(NET, 16, 5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    prob = EstimationProblem(NET, add_gaussian_noise(measure(V, NET, standard_plan(NET)), 2))
    one = multistart(prob, 4, 1, threads=1)
    two = multistart(prob, 4, 1, threads=3)
    assert np.array_equal(one.state, two.state) and one.cost == two.cost


def test_iterates_never_increase_cost():
    prob = EstimationProblem(NET, add_gaussian_noise(measure(V, NET, standard_plan(NET)), 4))
    res = estimate_wls(prob, None, WlsOptions(precondition=False, max_iter=200))
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-12 * np.maximum(1, h[:-1]))


def test_divergent_start_raises():
    prob = EstimationProblem(NET, measure(V, NET, standard_plan(NET)))
    with pytest.raises(EstimationError):
        estimate_wls(prob, np.full(NET.n, np.nan))


def test_metrics_definition():
    m = metrics(np.array([1, 1j]), np.array([1, 0]))
    assert m == {"d2": 1.0, "dinf": 1.0}
    with pytest.raises(ValueError):
        metrics(np.ones(2), np.ones(3))


def test_lbfgs_rosenbrock():
    def rosen(x):
        f = 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
        g = np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200 * (x[1] - x[0] ** 2)])
        return f, g

    res = lbfgs(rosen, np.array([-1.2, 1.0]), ftol=1e-15, gtol=1e-8)
    assert res.converged
    assert np.allclose(res.x, 1, atol=1e-5)


def test_lbfgs_stopping_rule_is_relative_change():
    def quad(x):
        return float(x @ x), 2 * x

    res = lbfgs(quad, np.ones(3), ftol=1e-6, gtol=0.0)
    assert res.f < 1e-6
    assert res.converged


def test_bad_weight_group():
    with pytest.raises(ValueError):
        EstimationProblem(NET, measure(V, NET, ["vm"]), {"nope": 1.0})
