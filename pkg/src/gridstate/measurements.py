"""Measurement functions and measurement containers.

Every SCADA quantity is a Hermitian quadratic form ``Tr(M vv*)`` of the
complex state; every PMU quantity is linear in the state.  The trace
matrices are available through :func:`build_measurement_matrices`, while
:class:`MeasurementModel` evaluates the same quantities in vectorised form
for the solvers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .network import Network, build_branch_admittance, build_bus_admittance, incidence

__all__ = [
    "KINDS",
    "SCADA_KINDS",
    "PMU_KINDS",
    "WEIGHT_GROUPS",
    "Measurement",
    "MeasurementSet",
    "MeasurementMatrices",
    "MeasurementModel",
    "build_measurement_matrices",
    "power_injections",
    "evaluate_h",
    "standard_plan",
    "pmu_plan",
    "measure",
    "read_jsonl",
    "write_jsonl",
]

# kind -> (element the target indexes, weight group)
KINDS = {
    "vm": ("bus", "v_scada"),
    "p": ("bus", "pq_scada"),
    "q": ("bus", "pq_scada"),
    "pf": ("branch", "pq_scada"),
    "qf": ("branch", "pq_scada"),
    "pt": ("branch", "pq_scada"),
    "qt": ("branch", "pq_scada"),
    "pmu_v": ("bus", "v_pmu"),
    "pmu_i": ("bus", "i_pmu"),
    "pmu_if": ("branch", "itf_pmu"),
    "pmu_it": ("branch", "itf_pmu"),
}
SCADA_KINDS = ("vm", "p", "q", "pf", "qf", "pt", "qt")
PMU_KINDS = ("pmu_v", "pmu_i", "pmu_if", "pmu_it")
WEIGHT_GROUPS = ("v_pmu", "i_pmu", "itf_pmu", "pq_scada", "v_scada")


def _check_kind(kind):
    if kind not in KINDS:
        raise ValueError(f"unknown measurement kind {kind!r}")


@dataclass(frozen=True)
class Measurement:
    kind: str
    target: int
    value: complex | float
    weight: float = 1.0
    faulty: bool = False

    def __post_init__(self):
        _check_kind(self.kind)
        if not self.weight > 0:
            raise ValueError(f"measurement weight must be positive, got {self.weight}")
        if self.kind in PMU_KINDS:
            object.__setattr__(self, "value", complex(self.value))
        else:
            object.__setattr__(self, "value", float(np.real(self.value)))

    @property
    def is_pmu(self) -> bool:
        return self.kind in PMU_KINDS


@dataclass(frozen=True)
class MeasurementSet:
    entries: tuple[Measurement, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def fault_mask(self) -> np.ndarray:
        return np.array([e.faulty for e in self.entries], dtype=bool)

    @property
    def n_scada(self) -> int:
        return sum(not e.is_pmu for e in self.entries)

    @property
    def n_pmu(self) -> int:
        return sum(e.is_pmu for e in self.entries)

    @property
    def size(self) -> int:
        """Real measurement count ``L = L_SCADA + 2 L_PMU``."""
        return self.n_scada + 2 * self.n_pmu

    @property
    def plan(self) -> list[tuple[str, int]]:
        return [(e.kind, e.target) for e in self.entries]

    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.entries], dtype=complex)

    def real_vector(self) -> np.ndarray:
        """Measurements flattened to reals (PMU entries contribute two values)."""
        out = []
        for e in self.entries:
            if e.is_pmu:
                out += [e.value.real, e.value.imag]
            else:
                out.append(e.value)
        return np.array(out, dtype=float)

    def with_values(self, values, faulty=None) -> "MeasurementSet":
        faulty = self.fault_mask if faulty is None else faulty
        return MeasurementSet(
            replace(e, value=val, faulty=bool(fl)) for e, val, fl in zip(self.entries, values, faulty)
        )


# ---------------------------------------------------------------------------
# trace-form matrices


@dataclass(frozen=True)
class MeasurementMatrices:
    """Stacks of trace matrices; ``E[k]`` is ``e_k e_k^T`` and so on."""

    E: np.ndarray
    Yp: np.ndarray
    Yq: np.ndarray
    Ypf: np.ndarray
    Ypt: np.ndarray
    Yqf: np.ndarray
    Yqt: np.ndarray

    def for_kind(self, kind: str) -> np.ndarray:
        return {"vm": self.E, "p": self.Yp, "q": self.Yq, "pf": self.Ypf,
                "pt": self.Ypt, "qf": self.Yqf, "qt": self.Yqt}[kind]


def build_measurement_matrices(net: Network) -> MeasurementMatrices:
    Y = build_bus_admittance(net)
    Yf, Yt = build_branch_admittance(net)
    n, m = net.n, net.m
    eye = np.eye(n)
    E = np.einsum("ki,kj->kij", eye, eye).astype(complex)
    YH = Y.conj().T
    # E_k Y keeps row k of Y; Y* E_k keeps column k of Y*
    EY = np.einsum("ki,kj->kij", eye, Y)
    YHE = np.einsum("ik,kj->kij", YH, eye)
    Yp = 0.5 * (YHE + EY)
    Yq = 0.5j * (EY - YHE)

    def branch(Yx, ends):
        # e_{l_x} d_l^T Y_x : row l_x holds row l of Y_x
        eD = np.zeros((m, n, n), dtype=complex)
        eD[np.arange(m), ends, :] = Yx
        DeH = np.conj(np.transpose(eD, (0, 2, 1)))
        return 0.5 * (DeH + eD), 0.5j * (eD - DeH)

    Ypf, Yqf = branch(Yf, net.from_index)
    Ypt, Yqt = branch(Yt, net.to_index)
    return MeasurementMatrices(E, Yp, Yq, Ypf, Ypt, Yqf, Yqt)


def power_injections(v, Y) -> np.ndarray:
    """Complex bus injections ``s = v * conj(Y v)``."""
    v = np.asarray(v, dtype=complex)
    return v * np.conj(Y @ v)


class MeasurementModel:
    """Vectorised evaluation of all measurement quantities for one network."""

    def __init__(self, net: Network):
        self.net = net
        self.Y = build_bus_admittance(net)
        self.Yf, self.Yt = build_branch_admittance(net)
        self.Cf, self.Ct = incidence(net)
        self.f = net.from_index
        self.t = net.to_index

    def quantities(self, v) -> dict[str, np.ndarray]:
        v = np.asarray(v, dtype=complex)
        i = self.Y @ v
        i_f = self.Yf @ v
        i_t = self.Yt @ v
        s = v * np.conj(i)
        sf = v[self.f] * np.conj(i_f)
        st = v[self.t] * np.conj(i_t)
        return {
            "vm": (v * v.conj()).real,
            "p": s.real, "q": s.imag,
            "pf": sf.real, "qf": sf.imag,
            "pt": st.real, "qt": st.imag,
            "pmu_v": v, "pmu_i": i, "pmu_if": i_f, "pmu_it": i_t,
        }

    def evaluate(self, v, plan: Sequence[tuple[str, int]]) -> np.ndarray:
        q = self.quantities(v)
        out = np.empty(len(plan), dtype=complex)
        for j, (kind, target) in enumerate(plan):
            _check_kind(kind)
            out[j] = q[kind][target]
        return out


def _expand(net: Network, which) -> list[tuple[str, int]]:
    plan = []
    for item in which:
        if isinstance(item, str):
            _check_kind(item)
            count = net.n if KINDS[item][0] == "bus" else net.m
            plan += [(item, k) for k in range(count)]
        else:
            kind, target = item
            _check_kind(kind)
            count = net.n if KINDS[kind][0] == "bus" else net.m
            if not 0 <= target < count:
                raise IndexError(f"{kind} target {target} out of range")
            plan.append((kind, int(target)))
    return plan


def evaluate_h(v, net: Network, which: Iterable) -> np.ndarray:
    """Measurement function ``h(v)``.

    ``which`` lists kinds (all targets of that kind) or ``(kind, target)``
    pairs.  ``"vm"`` returns ``|v_k|^2``.  The result is real unless a PMU
    kind is requested.
    """
    plan = _expand(net, which)
    out = MeasurementModel(net).evaluate(v, plan)
    if any(k in PMU_KINDS for k, _ in plan):
        return out
    return out.real


def standard_plan(net: Network, kinds=("vm", "p", "q", "pf", "qf")) -> list[tuple[str, int]]:
    """All targets of the given kinds, kind-major.

    The default is the SCADA set of voltage magnitudes, bus injections and
    from-end branch flows, i.e. ``3n + 2m`` real measurements.
    """
    return _expand(net, kinds)


def pmu_plan(net: Network, buses: Iterable[int], currents=True) -> list[tuple[str, int]]:
    """PMU voltage phasors at ``buses`` and, optionally, the currents of every
    branch end located at those buses."""
    buses = sorted(set(int(b) for b in buses))
    plan = [("pmu_v", k) for k in buses]
    if currents:
        plan += [("pmu_if", l) for l in range(net.m) if net.branches[l].from_bus in buses]
        plan += [("pmu_it", l) for l in range(net.m) if net.branches[l].to_bus in buses]
    return plan


def measure(v, net: Network, plan, weight=1.0) -> MeasurementSet:
    """Noise-free measurements of state ``v``; voltage magnitudes are reported
    as ``|v_k|`` (not squared), as a SCADA device would."""
    plan = _expand(net, plan)
    vals = MeasurementModel(net).evaluate(v, plan)
    entries = []
    for (kind, target), val in zip(plan, vals):
        if kind == "vm":
            val = np.sqrt(val.real)
        entries.append(Measurement(kind, target, val, weight))
    return MeasurementSet(entries)


# ---------------------------------------------------------------------------
# JSON lines


def _to_record(e: Measurement) -> dict:
    rec = {"kind": e.kind, "target": e.target, "value_re": float(np.real(e.value))}
    if e.is_pmu:
        rec["value_im"] = float(np.imag(e.value))
    rec["weight"] = e.weight
    rec["faulty"] = e.faulty
    return rec


def write_jsonl(ms: MeasurementSet, path=None) -> str:
    text = "".join(json.dumps(_to_record(e)) + "\n" for e in ms)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def read_jsonl(source) -> MeasurementSet:
    """Read measurements from a path or from JSON-lines text."""
    if "\n" in source or source.lstrip().startswith("{"):
        text = source
    else:
        with open(source) as fh:
            text = fh.read()
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            value = complex(rec["value_re"], rec.get("value_im", 0.0))
            entries.append(Measurement(rec["kind"], int(rec["target"]), value,
                                       float(rec.get("weight", 1.0)), bool(rec.get("faulty", False))))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"measurement line {lineno}: {exc}") from None
    return MeasurementSet(entries)
