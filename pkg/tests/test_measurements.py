import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridstate.measurements import (
    PMU_KINDS,
    SCADA_KINDS,
    Measurement,
    MeasurementSet,
    build_measurement_matrices,
    evaluate_h,
    measure,
    pmu_plan,
    read_jsonl,
    standard_plan,
    write_jsonl,
)
from gridstate.network import load_case, solve_power_flow

NET14 = load_case("case14")


def random_state(rng, n):
    return rng.uniform(0.8, 1.2, n) * np.exp(1j * rng.uniform(-0.5, 0.5, n))


def test_trace_form_matches_direct_evaluation():
    rng = np.random.default_rng(0)
    v = random_state(rng, NET14.n)
    mats = build_measurement_matrices(NET14)
    for kind in SCADA_KINDS:
        M = mats.for_kind(kind)
        trace = np.einsum("i,kij,j->k", v.conj(), M, v)
        assert np.abs(trace.imag).max() < 1e-12
        assert np.allclose(trace.real, evaluate_h(v, NET14, [kind]), atol=1e-12)
        assert np.allclose(M, np.conj(np.transpose(M, (0, 2, 1))))  # Hermitian


def test_flows_from_first_principles():
    net = load_case("case30")
    v = solve_power_flow(net)
    for l, br in enumerate(net.branches):
        f, t = br.from_bus, br.to_bus
        vs = v[f] / br.tap  # transformer secondary
        i_to = (v[t] - vs) * br.series_admittance + br.charging_admittance / 2 * v[t]
        s_to = v[t] * np.conj(i_to)
        assert evaluate_h(v, net, [("pt", l)])[0] == pytest.approx(s_to.real, abs=1e-12)
        assert evaluate_h(v, net, [("qt", l)])[0] == pytest.approx(s_to.imag, abs=1e-12)


def test_losses_are_nonnegative_on_lines():
    net = load_case("case14")
    v = solve_power_flow(net)
    loss = evaluate_h(v, net, ["pf"]) + evaluate_h(v, net, ["pt"])
    assert loss.min() > -1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-np.pi, np.pi), st.floats(0.5, 2.0))
def test_scada_quadratic_and_pmu_linear(seed, phase, scale):
    rng = np.random.default_rng(seed)
    v = random_state(rng, NET14.n)
    c = scale * np.exp(1j * phase)
    scada = evaluate_h(v, NET14, SCADA_KINDS)
    assert np.allclose(evaluate_h(c * v, NET14, SCADA_KINDS), scale**2 * scada, atol=1e-10)
    plan = pmu_plan(NET14, [0, 3, 7]) + [("pmu_i", 2)]
    assert np.allclose(evaluate_h(c * v, NET14, plan), c * evaluate_h(v, NET14, plan), atol=1e-12)


def test_standard_plan_size():
    plan = standard_plan(NET14)
    assert len(plan) == 3 * NET14.n + 2 * NET14.m
    ms = measure(solve_power_flow(NET14), NET14, plan)
    assert ms.size == len(plan)


def test_pmu_entries_count_twice():
    v = solve_power_flow(NET14)
    ms = measure(v, NET14, [("vm", 0), ("pmu_v", 1), ("pmu_if", 2)])
    assert (ms.n_scada, ms.n_pmu, ms.size) == (1, 2, 5)
    assert len(ms.real_vector()) == 5


def test_measure_reports_magnitude_not_square():
    v = solve_power_flow(NET14)
    ms = measure(v, NET14, ["vm"])
    assert np.allclose(ms.values().real, np.abs(v))


def test_jsonl_round_trip(tmp_path):
    v = solve_power_flow(NET14)
    ms = measure(v, NET14, standard_plan(NET14) + pmu_plan(NET14, [1, 4]))
    path = tmp_path / "m.jsonl"
    text = write_jsonl(ms, str(path))
    again = read_jsonl(str(path))
    assert again == ms
    assert write_jsonl(again) == text
    assert read_jsonl(text) == ms


def test_jsonl_bad_line_reports_position():
    with pytest.raises(ValueError, match="line 2"):
        read_jsonl('{"kind": "vm", "target": 0, "value_re": 1.0}\n{"kind": "vm"}\n')


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        Measurement("watts", 0, 1.0)
    with pytest.raises((ValueError, IndexError)):
        evaluate_h(np.ones(NET14.n), NET14, [("p", 99)])


def test_measurement_set_is_sequence():
    ms = MeasurementSet([Measurement("vm", 0, 1.0), Measurement("pmu_v", 1, 1 + 1j)])
    assert len(ms) == 2 and ms[1].kind in PMU_KINDS
    assert list(ms.fault_mask) == [False, False]
