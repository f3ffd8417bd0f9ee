"""Network model: MATPOWER-style case parsing and admittance matrices.

All quantities are converted to per-unit once, at parse time.  Buses are
renumbered to a compact 0-based index; the external ids are kept on each
:class:`Bus` so that a case can be written back out unchanged.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

__all__ = [
    "Bus",
    "Branch",
    "Network",
    "CaseFormatError",
    "NetworkError",
    "parse_case",
    "emit_case",
    "load_case",
    "bundled_cases",
    "build_bus_admittance",
    "build_branch_admittance",
    "incidence",
    "solve_power_flow",
]

PQ, PV, REF, ISOLATED = 1, 2, 3, 4


class NetworkError(ValueError):
    """Raised when a network violates a structural invariant."""


class CaseFormatError(NetworkError):
    """Raised for malformed case text.  ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Bus:
    id: int
    shunt_admittance: complex = 0j
    is_reference: bool = False
    kind: int = PQ
    load: complex = 0j
    generation: complex = 0j
    vm: float = 1.0
    va: float = 0.0  # radians


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    series_admittance: complex
    charging_admittance: complex = 0j
    tap_ratio: float = 1.0
    phase_shift: float = 0.0  # radians
    # impedance as read from a case file, so that writing it back is exact
    impedance: complex | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus} is a self loop")
        if not self.tap_ratio > 0:
            raise NetworkError(f"tap ratio must be positive, got {self.tap_ratio}")
        if self.series_admittance == 0:
            raise NetworkError("branch has zero series admittance")

    @property
    def tap(self) -> complex:
        """Complex off-nominal turns ratio tau * exp(i theta_shift)."""
        return self.tap_ratio * complex(math.cos(self.phase_shift), math.sin(self.phase_shift))


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 100.0
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        n = len(self.buses)
        if n < 2:
            raise NetworkError(f"a network needs at least 2 buses, got {n}")
        refs = [k for k, b in enumerate(self.buses) if b.is_reference]
        if len(refs) != 1:
            raise NetworkError(f"exactly one reference bus required, found {len(refs)}")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != n:
            raise NetworkError("duplicate bus ids")
        for br in self.branches:
            if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
                raise NetworkError(f"branch references unknown bus index {br.from_bus}/{br.to_bus}")
        if not self.branches:
            raise NetworkError("network is disconnected (no branches)")
        f, t = self.from_index, self.to_index
        adj = coo_matrix((np.ones(len(f)), (f, t)), shape=(n, n))
        ncomp, _ = connected_components(adj, directed=False)
        if ncomp != 1:
            raise NetworkError(f"network is disconnected ({ncomp} islands)")

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def m(self) -> int:
        return len(self.branches)

    @property
    def reference(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.is_reference)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def from_index(self) -> np.ndarray:
        return np.array([br.from_bus for br in self.branches], dtype=int)

    @property
    def to_index(self) -> np.ndarray:
        return np.array([br.to_bus for br in self.branches], dtype=int)

    def index_of(self, bus_id: int) -> int:
        for k, b in enumerate(self.buses):
            if b.id == bus_id:
                return k
        raise KeyError(bus_id)

    def case_state(self) -> np.ndarray:
        """Voltage phasors stored in the case's Vm/Va columns."""
        vm = np.array([b.vm for b in self.buses])
        va = np.array([b.va for b in self.buses])
        return vm * np.exp(1j * va)

    def injections(self, load_scale=1.0) -> np.ndarray:
        """Scheduled net complex power injection per bus (generation - load)."""
        gen = np.array([b.generation for b in self.buses])
        load = np.array([b.load for b in self.buses])
        return gen - load_scale * load

    def with_loads(self, scale) -> "Network":
        """Copy with every bus load multiplied by ``scale`` (scalar or per-bus)."""
        scale = np.broadcast_to(np.asarray(scale, dtype=float), (self.n,))
        buses = tuple(
            Bus(b.id, b.shunt_admittance, b.is_reference, b.kind, b.load * float(s),
                b.generation, b.vm, b.va)
            for b, s in zip(self.buses, scale)
        )
        return Network(buses, self.branches, self.base_mva, self.name)


# ---------------------------------------------------------------------------
# case text

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    # '%' inside quoted strings never occurs in the numeric subset we read
    i = line.find("%")
    return line if i < 0 else line[:i]


def _read_sections(text: str):
    """Return ({name: scalar-or-rows}, {name: first line number})."""
    sections, where = {}, {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        raw = _strip_comment(lines[i])
        mt = _ASSIGN.match(raw)
        if not mt:
            i += 1
            continue
        name, rhs = mt.group(1), mt.group(2).strip()
        where[name] = i + 1
        if not rhs.startswith("["):
            rhs = rhs.rstrip(";").strip()
            try:
                sections[name] = float(rhs)
            except ValueError:
                sections[name] = rhs.strip("'\"")
            i += 1
            continue
        rows, row_lines = [], []
        body = rhs[1:]
        lineno = i + 1
        closed = False
        while True:
            if "]" in body:
                body = body[: body.index("]")]
                closed = True
            for chunk in body.split(";"):
                tokens = chunk.replace(",", " ").split()
                if not tokens:
                    continue
                try:
                    rows.append([float(tok) for tok in tokens])
                except ValueError:
                    bad = next(t for t in tokens if not _is_number(t))
                    raise CaseFormatError(f"cannot parse number {bad!r} in mpc.{name}", lineno)
                row_lines.append(lineno)
            if closed:
                break
            i += 1
            if i >= len(lines):
                raise CaseFormatError(f"unterminated matrix mpc.{name}", where[name])
            body = _strip_comment(lines[i])
            lineno = i + 1
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            w0 = len(rows[0])
            k = next(j for j, r in enumerate(rows) if len(r) != w0)
            raise CaseFormatError(f"ragged row in mpc.{name}", row_lines[k])
        sections[name] = (rows, row_lines)
        i += 1
    return sections, where


def _is_number(tok):
    try:
        float(tok)
        return True
    except ValueError:
        return False


def parse_case(text: str, name: str = "") -> Network:
    """Parse the MATPOWER subset (``baseMVA``, ``bus``, ``gen``, ``branch``).

    Column positions follow MATPOWER: bus ``[id, type, Pd, Qd, Gs, Bs, area,
    Vm, Va, ...]``, gen ``[bus, Pg, Qg, Qmax, Qmin, Vg, mBase, status, ...]``,
    branch ``[fbus, tbus, r, x, b, rateA, rateB, rateC, ratio, angle,
    status, ...]``.  Out-of-service branches and generators are dropped.
    """
    sections, where = _read_sections(text)
    if "bus" not in sections:
        raise CaseFormatError("missing mpc.bus")
    if "branch" not in sections:
        raise CaseFormatError("missing mpc.branch")
    base = sections.get("baseMVA", 100.0)
    if not isinstance(base, float) or base <= 0:
        raise CaseFormatError("baseMVA must be a positive number", where.get("baseMVA"))

    bus_rows, bus_lines = sections["bus"]
    for r, ln in zip(bus_rows, bus_lines):
        if len(r) < 6:
            raise CaseFormatError("bus row needs at least 6 columns", ln)
    ids = [int(r[0]) for r in bus_rows]
    if len(set(ids)) != len(ids):
        raise CaseFormatError("duplicate bus id", where["bus"])
    pos = {bid: k for k, bid in enumerate(ids)}

    gen = np.zeros(len(ids), dtype=complex)
    vset = {}
    if "gen" in sections:
        for r, ln in zip(*sections["gen"]):
            if len(r) < 2:
                raise CaseFormatError("gen row needs at least 2 columns", ln)
            if len(r) > 7 and r[7] <= 0:
                continue
            k = pos.get(int(r[0]))
            if k is None:
                raise CaseFormatError(f"generator at unknown bus {int(r[0])}", ln)
            qg = r[2] if len(r) > 2 else 0.0
            gen[k] += complex(r[1], qg) / base
            if len(r) > 5:
                vset.setdefault(k, r[5])

    types = [int(r[1]) for r in bus_rows]
    refs = [k for k, t in enumerate(types) if t == REF]
    if len(refs) > 1:
        raise CaseFormatError("more than one reference bus", where["bus"])
    if not refs:
        ref = min(range(len(ids)), key=lambda k: ids[k])
    else:
        ref = refs[0]

    buses = []
    for k, r in enumerate(bus_rows):
        vm = r[7] if len(r) > 7 else 1.0
        va = math.radians(r[8]) if len(r) > 8 else 0.0
        if k in vset and types[k] in (PV, REF):
            vm = vset[k]
        buses.append(Bus(
            id=ids[k],
            shunt_admittance=complex(r[4], r[5]) / base,
            is_reference=(k == ref),
            kind=REF if k == ref else types[k],
            load=complex(r[2], r[3]) / base,
            generation=gen[k],
            vm=vm,
            va=va,
        ))

    branches = []
    for r, ln in zip(*sections["branch"]):
        if len(r) < 4:
            raise CaseFormatError("branch row needs at least 4 columns", ln)
        if len(r) > 10 and r[10] <= 0:
            continue
        f, t = int(r[0]), int(r[1])
        if f not in pos or t not in pos:
            raise CaseFormatError(f"branch {f}-{t} references an unknown bus", ln)
        z = complex(r[2], r[3])
        if z == 0:
            raise CaseFormatError(f"zero-impedance branch {f}-{t}", ln)
        b = r[4] if len(r) > 4 else 0.0
        ratio = r[8] if len(r) > 8 and r[8] != 0 else 1.0
        shift = math.radians(r[9]) if len(r) > 9 else 0.0
        try:
            branches.append(Branch(pos[f], pos[t], 1 / z, 1j * b, ratio, shift, z))
        except NetworkError as exc:
            raise CaseFormatError(str(exc), ln) from None
    return Network(tuple(buses), tuple(branches), base, name)


def _fmt(x: float) -> str:
    x = float(x)
    if x == 0:
        return "0"
    return repr(x)


def _degrees(rad: float) -> float:
    """Degrees that parse back to exactly ``rad``, when a nearby float does."""
    d = math.degrees(rad)
    for cand in (d, math.nextafter(d, math.inf), math.nextafter(d, -math.inf)):
        if math.radians(cand) == rad:
            return cand
    return d


def emit_case(net: Network, name: str | None = None) -> str:
    """Write ``net`` in the same MATPOWER subset that :func:`parse_case` reads."""
    name = name or net.name or "case"
    base = net.base_mva
    out = [f"function mpc = {name}", "", "mpc.version = '2';", "",
           f"mpc.baseMVA = {_fmt(base)};", "", "mpc.bus = ["]
    for b in net.buses:
        row = [b.id, b.kind, b.load.real * base, b.load.imag * base,
               b.shunt_admittance.real * base, b.shunt_admittance.imag * base,
               1, b.vm, _degrees(b.va), 0, 1, 1.1, 0.9]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "", "mpc.gen = ["]
    for b in net.buses:
        if b.generation != 0 or b.kind in (PV, REF):
            row = [b.id, b.generation.real * base, b.generation.imag * base,
                   0, 0, b.vm, base, 1, 0, 0]
            out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", "", "mpc.branch = ["]
    for br in net.branches:
        z = br.impedance if br.impedance is not None else 1 / br.series_admittance
        row = [net.buses[br.from_bus].id, net.buses[br.to_bus].id, z.real, z.imag,
               br.charging_admittance.imag, 0, 0, 0, br.tap_ratio,
               _degrees(br.phase_shift), 1, -360, 360]
        out.append("\t" + "\t".join(_fmt(v) for v in row) + ";")
    out += ["];", ""]
    return "\n".join(out)


def bundled_cases() -> list[str]:
    files = resources.files("gridstate").joinpath("cases").iterdir()
    return sorted(p.name[:-2] for p in files if p.name.endswith(".m"))


def load_case(name_or_path: str) -> Network:
    """Load a bundled case by name (``"case14"``) or a case file by path."""
    res = resources.files("gridstate").joinpath("cases", f"{name_or_path}.m")
    if res.is_file():
        return parse_case(res.read_text(), name=name_or_path)
    with open(name_or_path) as fh:
        text = fh.read()
    stem = re.sub(r"\.m$", "", name_or_path.replace("\\", "/").rsplit("/", 1)[-1])
    return parse_case(text, name=stem)


# ---------------------------------------------------------------------------
# admittance matrices


def _branch_blocks(net: Network):
    """Per-branch 2x2 pi-model blocks (yff, yft, ytf, ytt)."""
    y = np.array([br.series_admittance for br in net.branches], dtype=complex)
    yg = np.array([br.charging_admittance for br in net.branches], dtype=complex)
    tap = np.array([br.tap for br in net.branches], dtype=complex)
    tau = np.abs(tap)
    ytt = y + yg / 2
    yff = ytt / tau**2
    yft = -y / np.conj(tap)
    ytf = -y / tap
    return yff, yft, ytf, ytt


def build_branch_admittance(net: Network) -> tuple[np.ndarray, np.ndarray]:
    """From/to branch admittance matrices, each ``m x n``.

    ``Y_f @ v`` is the current entering each branch at its from end and
    ``Y_t @ v`` the current entering at its to end.
    """
    yff, yft, ytf, ytt = _branch_blocks(net)
    rows = np.arange(net.m)
    f, t = net.from_index, net.to_index
    Yf = np.zeros((net.m, net.n), dtype=complex)
    Yt = np.zeros((net.m, net.n), dtype=complex)
    Yf[rows, f] = yff
    Yf[rows, t] = yft
    Yt[rows, f] = ytf
    Yt[rows, t] = ytt
    return Yf, Yt


def build_bus_admittance(net: Network) -> np.ndarray:
    """Bus admittance matrix ``Y`` (``n x n``); parallel branches are summed."""
    yff, yft, ytf, ytt = _branch_blocks(net)
    f, t = net.from_index, net.to_index
    Y = np.zeros((net.n, net.n), dtype=complex)
    np.add.at(Y, (f, f), yff)
    np.add.at(Y, (f, t), yft)
    np.add.at(Y, (t, f), ytf)
    np.add.at(Y, (t, t), ytt)
    Y[np.diag_indices(net.n)] += [b.shunt_admittance for b in net.buses]
    return Y


def incidence(net: Network) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``m x n`` 0/1 matrices selecting each branch's from and to bus."""
    Cf = np.zeros((net.m, net.n))
    Ct = np.zeros((net.m, net.n))
    rows = np.arange(net.m)
    Cf[rows, net.from_index] = 1.0
    Ct[rows, net.to_index] = 1.0
    return Cf, Ct


# ---------------------------------------------------------------------------
# power flow (used to produce ground-truth states)


def solve_power_flow(net: Network, injections=None, init=None, tol=1e-10, max_iter=30):
    """Newton-Raphson AC power flow in polar coordinates.

    PQ buses hold their scheduled injection, PV buses their active injection
    and the case voltage magnitude, the reference bus its case voltage.
    Returns the complex bus voltage vector.
    """
    Y = build_bus_admittance(net)
    s_spec = net.injections() if injections is None else np.asarray(injections, dtype=complex)
    kinds = np.array([b.kind for b in net.buses])
    ref = net.reference
    pv = np.flatnonzero((kinds == PV) & (np.arange(net.n) != ref))
    pq = np.flatnonzero((kinds != PV) & (np.arange(net.n) != ref))
    pvpq = np.r_[pv, pq]

    V = net.case_state() if init is None else np.array(init, dtype=complex)
    vm_set = np.array([b.vm for b in net.buses])
    V[pv] = vm_set[pv] * np.exp(1j * np.angle(V[pv]))
    V[ref] = net.buses[ref].vm * np.exp(1j * net.buses[ref].va)
    Vm, Va = np.abs(V), np.angle(V)

    def mismatch(V):
        mis = V * np.conj(Y @ V) - s_spec
        return np.r_[mis.real[pvpq], mis.imag[pq]]

    F = mismatch(V)
    for _ in range(max_iter):
        if np.max(np.abs(F), initial=0.0) < tol:
            return V
        Ibus = Y @ V
        dVa = 1j * np.diag(V) @ np.conj(np.diag(Ibus) - Y @ np.diag(V))
        dVm = np.diag(V) @ np.conj(Y @ np.diag(V / np.abs(V))) + np.conj(np.diag(Ibus)) @ np.diag(V / np.abs(V))
        J = np.block([
            [dVa.real[np.ix_(pvpq, pvpq)], dVm.real[np.ix_(pvpq, pq)]],
            [dVa.imag[np.ix_(pq, pvpq)], dVm.imag[np.ix_(pq, pq)]],
        ])
        dx = np.linalg.solve(J, -F)
        Va[pvpq] += dx[: len(pvpq)]
        Vm[pq] += dx[len(pvpq):]
        V = Vm * np.exp(1j * Va)
        F = mismatch(V)
    if np.max(np.abs(F)) < tol:
        return V
    raise NetworkError(f"power flow did not converge (mismatch {np.max(np.abs(F)):.3e})")
