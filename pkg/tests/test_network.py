import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import DATA
from gridstate.network import (
    PQ,
    REF,
    Branch,
    Bus,
    CaseFormatError,
    Network,
    NetworkError,
    build_branch_admittance,
    build_bus_admittance,
    bundled_cases,
    emit_case,
    load_case,
    parse_case,
    solve_power_flow,
)


def stamp_oracle(net):
    """Y, Y_f, Y_t from the pi-model circuit, one branch at a time.

    Each branch end current is computed by driving unit voltages through an
    ideal transformer (ratio N on the from side) followed by the series
    admittance and half the charging at each end.
    """
    n, m = net.n, net.m
    Y = np.zeros((n, n), dtype=complex)
    Yf = np.zeros((m, n), dtype=complex)
    Yt = np.zeros((m, n), dtype=complex)
    for k, b in enumerate(net.buses):
        Y[k, k] += b.shunt_admittance
    for l, br in enumerate(net.branches):
        N = br.tap_ratio * complex(math.cos(br.phase_shift), math.sin(br.phase_shift))
        y, half = br.series_admittance, br.charging_admittance / 2
        for bus, (vf, vt) in ((br.from_bus, (1, 0)), (br.to_bus, (0, 1))):
            secondary = vf / N
            i_sec = (secondary - vt) * y + half * secondary  # leaves the transformer secondary
            i_from = i_sec / N.conjugate()  # lossless ideal transformer
            i_to = (vt - secondary) * y + half * vt
            Yf[l, bus] += i_from
            Yt[l, bus] += i_to
            Y[br.from_bus, bus] += i_from
            Y[br.to_bus, bus] += i_to
    return Y, Yf, Yt


def random_network(rng, n):
    buses = [Bus(100 + k, complex(rng.uniform(0, 0.05), rng.uniform(-0.1, 0.1)), k == 0,
                 REF if k == 0 else PQ) for k in range(n)]
    branches = []
    for k in range(1, n):  # spanning tree keeps it connected
        branches.append((int(rng.integers(k)), k))
    for _ in range(int(rng.integers(0, n))):
        a, b = rng.choice(n, 2, replace=False)
        branches.append((int(a), int(b)))
    out = []
    for f, t in branches:
        z = complex(rng.uniform(0.001, 0.1), rng.uniform(0.01, 0.5))
        trafo = rng.random() < 0.5
        out.append(Branch(f, t, 1 / z, 1j * rng.uniform(0, 0.3),
                          rng.uniform(0.9, 1.1) if trafo else 1.0,
                          rng.uniform(-0.2, 0.2) if trafo and rng.random() < 0.5 else 0.0))
    return Network(buses, out)


@pytest.mark.parametrize("case", ["case14", "case30", "case39", "case57"])
def test_admittance_matches_stamping_oracle(case):
    net = load_case(case)
    Y0, Yf0, Yt0 = stamp_oracle(net)
    Yf, Yt = build_branch_admittance(net)
    assert np.abs(build_bus_admittance(net) - Y0).max() <= 1e-12
    assert np.abs(Yf - Yf0).max() <= 1e-12
    assert np.abs(Yt - Yt0).max() <= 1e-12


def test_admittance_random_networks_with_transformers():
    rng = np.random.default_rng(7)
    shifted = 0
    for _ in range(50):
        net = random_network(rng, int(rng.integers(2, 12)))
        shifted += any(br.phase_shift != 0 for br in net.branches)
        Y0, Yf0, Yt0 = stamp_oracle(net)
        Yf, Yt = build_branch_admittance(net)
        assert np.abs(build_bus_admittance(net) - Y0).max() <= 1e-12
        assert np.abs(Yf - Yf0).max() <= 1e-12
        assert np.abs(Yt - Yt0).max() <= 1e-12
    assert shifted > 10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 9))
def test_row_sums_equal_shunts_without_transformers(seed, n):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n)
    net = Network(net.buses, [Branch(b.from_bus, b.to_bus, b.series_admittance,
                                     b.charging_admittance) for b in net.branches])
    Y = build_bus_admittance(net)
    expect = np.array([b.shunt_admittance for b in net.buses], dtype=complex)
    for br in net.branches:
        expect[br.from_bus] += br.charging_admittance / 2
        expect[br.to_bus] += br.charging_admittance / 2
    assert np.allclose(Y.sum(axis=1), expect, atol=1e-12)
    assert np.allclose(Y, Y.T, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 9))
def test_branch_currents_sum_to_bus_currents(seed, n):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n)
    v = rng.normal(size=n) + 1j * rng.normal(size=n)
    Yf, Yt = build_branch_admittance(net)
    i = np.array([b.shunt_admittance for b in net.buses]) * v
    np.add.at(i, net.from_index, Yf @ v)
    np.add.at(i, net.to_index, Yt @ v)
    assert np.allclose(build_bus_admittance(net) @ v, i, atol=1e-10)


@pytest.mark.parametrize("case", ["case14", "case30"])
def test_power_flow_matches_frozen_reference(case):
    with open(os.path.join(DATA, "pf_reference.json")) as fh:
        ref = json.load(fh)[case]
    v = solve_power_flow(load_case(case))
    expect = np.asarray(ref["vm"]) * np.exp(1j * np.deg2rad(ref["va"]))
    assert np.abs(v - expect).max() < 1e-9


def test_power_flow_satisfies_injections():
    net = load_case("case30")
    v = solve_power_flow(net)
    s = v * np.conj(build_bus_admittance(net) @ v)
    pq = [k for k, b in enumerate(net.buses) if b.kind == PQ]
    assert np.abs(s[pq] - net.injections()[pq]).max() < 1e-9


@pytest.mark.parametrize("case", bundled_cases())
def test_emit_parse_round_trip(case):
    net = load_case(case)
    again = parse_case(emit_case(net), name=case)
    assert again == net
    assert emit_case(again) == emit_case(net)


def test_round_trip_of_hand_built_network_is_within_rounding():
    net = random_network(np.random.default_rng(3), 8)
    again = parse_case(emit_case(net))
    for a, b in zip(net.branches, again.branches):
        assert abs(a.series_admittance - b.series_admittance) <= 1e-14 * abs(a.series_admittance)
        assert (a.tap_ratio, a.charging_admittance) == (b.tap_ratio, b.charging_admittance)
    assert again.buses == net.buses


def test_per_unit_conversion():
    net = load_case("case2")
    assert net.buses[1].load == pytest.approx(2 + 1j)
    assert net.branches[0].series_admittance == pytest.approx(1 / (0.01 + 0.1j))


def test_bad_case_text_reports_line():
    text = emit_case(load_case("case2")).replace("\t0.1\t", "\tabc\t")
    assert "abc" in text
    with pytest.raises(CaseFormatError) as err:
        parse_case(text)
    assert err.value.line is not None


def test_structural_invariants():
    a = Bus(1, is_reference=True, kind=REF)
    b = Bus(2)
    with pytest.raises(NetworkError):
        Network([a, Bus(2, is_reference=True, kind=REF)], [Branch(0, 1, 1 - 10j)])
    with pytest.raises(NetworkError):
        Network([a, b, Bus(3)], [Branch(0, 1, 1 - 10j)])  # island
    with pytest.raises(NetworkError):
        Branch(0, 0, 1 - 10j)
    with pytest.raises(NetworkError):
        Branch(0, 1, 1 - 10j, tap_ratio=0.0)


def test_unknown_case_name_raises():
    with pytest.raises(OSError):
        load_case("no_such_case")
