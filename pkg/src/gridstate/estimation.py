"""Weighted least-squares state estimation.

The objective sums, over selected measurements, the weighted squared
residuals of PMU phasors and SCADA powers plus the SCADA voltage term on
``|v|^2 - (|v|^SCADA)^2``.  The voltage term is squared by default; set
``voltage_term="abs"`` for the absolute-value variant.

States are optimised over ``2n - 1`` real coordinates: the real and
imaginary parts of every non-reference bus followed by the real part of the
reference bus, whose imaginary part is pinned to zero.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from .measurements import KINDS, PMU_KINDS, MeasurementModel, MeasurementSet
from .network import Network
from .optimize import DivergenceError, lbfgs

__all__ = [
    "EstimationProblem",
    "EstimateResult",
    "EstimationError",
    "WlsOptions",
    "objective_terms",
    "objective_cost",
    "objective_gradient",
    "estimate_wls",
    "multistart",
    "multistart_starts",
    "metrics",
    "observable",
    "to_coords",
    "from_coords",
    "flat_start",
]

class EstimationError(RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class EstimationProblem:
    """Network, measurements, weight constants and a measurement selection.

    ``weights`` maps the groups ``v_pmu``, ``i_pmu``, ``itf_pmu``,
    ``pq_scada`` and ``v_scada`` to their constants (default 1).
    ``selection`` holds one value in ``[0, 1]`` per measurement entry.
    """

    def __init__(self, net: Network, ms: MeasurementSet, weights=None, selection=None,
                 voltage_term="square"):
        if voltage_term not in ("square", "abs"):
            raise ValueError("voltage_term must be 'square' or 'abs'")
        self.net = net
        self.ms = ms
        self.weights = {g: 1.0 for g in ("v_pmu", "i_pmu", "itf_pmu", "pq_scada", "v_scada")}
        for g, c in (weights or {}).items():
            if g not in self.weights:
                raise ValueError(f"unknown weight group {g!r}")
            if not c > 0:
                raise ValueError("weight constants must be positive")
            self.weights[g] = float(c)
        self.voltage_term = voltage_term
        self.model = MeasurementModel(net)

        L = len(ms)
        self.kinds = [e.kind for e in ms]
        self.targets = np.array([e.target for e in ms], dtype=int)
        for e in ms:
            count = net.n if KINDS[e.kind][0] == "bus" else net.m
            if not 0 <= e.target < count:
                raise ValueError(f"measurement {e.kind} references nonexistent element {e.target}")
        self.values = ms.values()
        self.coef = np.array([e.weight * self.weights[KINDS[e.kind][1]] for e in ms])
        self.is_pmu = np.array([k in PMU_KINDS for k in self.kinds], dtype=bool)
        # per-kind entry indices, precomputed for the vectorised paths
        self.by_kind = {k: np.array([j for j in range(L) if self.kinds[j] == k], dtype=int)
                        for k in KINDS}
        self.selection = np.ones(L) if selection is None else np.asarray(selection, dtype=float)
        if self.selection.shape != (L,):
            raise ValueError("selection must have one entry per measurement")

    @property
    def n(self):
        return self.net.n

    @property
    def dim(self):
        return 2 * self.net.n - 1

    def with_selection(self, selection) -> "EstimationProblem":
        new = object.__new__(EstimationProblem)
        new.__dict__.update(self.__dict__)
        new.selection = np.asarray(selection, dtype=float)
        if new.selection.shape != (len(self.ms),):
            raise ValueError("selection must have one entry per measurement")
        return new

    def with_weights_scaled(self, alpha) -> "EstimationProblem":
        return EstimationProblem(self.net, self.ms, {g: alpha * c for g, c in self.weights.items()},
                                 self.selection, self.voltage_term)

    def with_measurements(self, ms: MeasurementSet) -> "EstimationProblem":
        return EstimationProblem(self.net, ms, self.weights, None, self.voltage_term)

    def measured(self, kind) -> np.ndarray:
        z = self.values[self.by_kind[kind]]
        return z if kind in PMU_KINDS else z.real

    def uses_pmu(self, selection=None) -> bool:
        sel = self.selection if selection is None else selection
        return bool(np.any(sel[self.is_pmu] > 0))


@dataclass
class EstimateResult:
    state: np.ndarray
    cost: float
    iterations: int
    converged: bool
    wall_time: float = 0.0
    message: str = ""
    history: list = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class WlsOptions:
    ftol: float = 1e-6
    gtol: float = 1e-6
    max_iter: int = 5000
    memory: int = 10
    c1: float = 1e-4
    precondition: bool = True
    refresh_every: int = 10


# ---------------------------------------------------------------------------
# coordinates


def to_coords(v, ref: int) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    mask = np.arange(len(v)) != ref
    return np.r_[v.real[mask], v.imag[mask], v.real[ref]]


def from_coords(x, n: int, ref: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    mask = np.arange(n) != ref
    v = np.empty(n, dtype=complex)
    v[mask] = x[: n - 1] + 1j * x[n - 1: 2 * n - 2]
    v[ref] = x[2 * n - 2]
    return v


def flat_start(net: Network) -> np.ndarray:
    return np.ones(net.n, dtype=complex)


# ---------------------------------------------------------------------------
# objective


def _residuals(q, prob: EstimationProblem):
    """Per-entry residuals: real for SCADA kinds, complex for PMU kinds."""
    r = np.zeros(len(prob.ms), dtype=complex)
    for kind, idx in prob.by_kind.items():
        if not len(idx):
            continue
        h = q[kind][prob.targets[idx]]
        z = prob.values[idx]
        if kind == "vm":
            r[idx] = h - z.real**2
        elif kind in PMU_KINDS:
            r[idx] = h - z
        else:
            r[idx] = h - z.real
    return r


def objective_terms(v, prob: EstimationProblem) -> np.ndarray:
    """Weighted, unselected term of every measurement entry (all ``>= 0``)."""
    q = prob.model.quantities(v)
    r = _residuals(q, prob)
    terms = np.abs(r) ** 2
    if prob.voltage_term == "abs":
        vm = prob.by_kind["vm"]
        terms[vm] = np.abs(r[vm])
    return prob.coef * terms


def objective_cost(v, prob: EstimationProblem, selection=None) -> float:
    sel = prob.selection if selection is None else np.asarray(selection, dtype=float)
    return float(sel @ objective_terms(v, prob))


def _complex_gradient(v, prob: EstimationProblem, sel):
    """``dF/dRe v + i dF/dIm v`` of the selected objective, and the cost."""
    model = prob.model
    q = model.quantities(v)
    r = _residuals(q, prob)
    a = sel * prob.coef
    terms = np.abs(r) ** 2
    vm = prob.by_kind["vm"]
    if prob.voltage_term == "abs":
        terms[vm] = np.abs(r[vm])
    cost = float(a @ terms)

    n = prob.n
    # SCADA terms a*r^2 contribute 4 a r M v; the abs voltage term 2 a sign(r) M v
    c = 4.0 * a * r.real
    if prob.voltage_term == "abs":
        c[vm] = 2.0 * a[vm] * np.sign(r[vm].real)

    def accumulate(kind, size):
        out = np.zeros(size)
        idx = prob.by_kind[kind]
        if len(idx):
            np.add.at(out, prob.targets[idx], c[idx])
        return out

    grad = np.zeros(n, dtype=complex)
    Y, Yf, Yt = model.Y, model.Yf, model.Yt
    i_bus = q["pmu_i"]
    grad += accumulate("vm", n) * v

    cp = accumulate("p", n)
    cq = accumulate("q", n)
    if cp.any() or cq.any():
        grad += 0.5 * (Y.conj().T @ (cp * v) + cp * i_bus)
        grad += 0.5j * (cq * i_bus - Y.conj().T @ (cq * v))

    m = prob.net.m
    for pk, qk, Yx, Cx, ends, ix in (("pf", "qf", Yf, model.Cf, model.f, q["pmu_if"]),
                                     ("pt", "qt", Yt, model.Ct, model.t, q["pmu_it"])):
        cpl = accumulate(pk, m)
        cql = accumulate(qk, m)
        if cpl.any() or cql.any():
            grad += 0.5 * (Yx.conj().T @ (cpl * v[ends]) + Cx.T @ (cpl * ix))
            grad += 0.5j * (Cx.T @ (cql * ix) - Yx.conj().T @ (cql * v[ends]))

    # PMU terms a|u|^2 contribute 2 conj(A_j) a u
    for kind, A, size in (("pmu_v", None, n), ("pmu_i", Y, n), ("pmu_if", Yf, m), ("pmu_it", Yt, m)):
        idx = prob.by_kind[kind]
        if not len(idx):
            continue
        w = np.zeros(size, dtype=complex)
        np.add.at(w, prob.targets[idx], 2.0 * a[idx] * r[idx])
        grad += w if A is None else A.conj().T @ w
    return grad, cost


def objective_gradient(v, prob: EstimationProblem, selection=None) -> np.ndarray:
    """Gradient over the ``2n - 1`` real coordinates (see :func:`to_coords`).

    The absolute-value voltage term uses subgradient 0 at its kink.
    """
    sel = prob.selection if selection is None else np.asarray(selection, dtype=float)
    gc, _ = _complex_gradient(np.asarray(v, dtype=complex), prob, sel)
    return to_coords(gc, prob.net.reference)


def _fun(prob, sel):
    n, ref = prob.n, prob.net.reference

    def fun(x):
        v = from_coords(x, n, ref)
        with np.errstate(over="ignore", invalid="ignore"):
            gc, cost = _complex_gradient(v, prob, sel)
        return cost, to_coords(gc, ref)

    return fun


def _real_residuals(x, prob, sel_sqrt):
    v = from_coords(x, prob.n, prob.net.reference)
    r = sel_sqrt * _residuals(prob.model.quantities(v), prob)
    return np.r_[r.real, r[prob.is_pmu].imag]


def _jacobian(prob, x0):
    """Jacobian of the weighted real residuals in coordinates, exact for
    quadratic residuals."""
    w = np.sqrt(prob.selection * prob.coef)
    dim = len(x0)
    J = np.empty((prob.ms.n_scada + 2 * prob.ms.n_pmu, dim))
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 0.5
        J[:, i] = _real_residuals(x0 + e, prob, w) - _real_residuals(x0 - e, prob, w)
    return J


def observable(prob: EstimationProblem, v, rtol: float = 1e-9) -> bool:
    """Whether the selected measurements pin the state down locally at ``v``:
    the residual Jacobian has full column rank."""
    s = np.linalg.svd(_jacobian(prob, to_coords(v, prob.net.reference)), compute_uv=False)
    return bool(s[0] > 0 and s[-1] > rtol * s[0])


def _preconditioner(prob: EstimationProblem, v0, coords=False):
    """Inverse Gauss-Newton matrix at ``v0`` as a fixed L-BFGS scaling.

    Residuals are quadratic in the coordinates, so central differences give
    their Jacobian exactly up to rounding.  Returns ``None`` when the
    Gauss-Newton matrix is numerically singular (for instance at ``v = 0``).
    """
    ref = prob.net.reference
    x0 = np.asarray(v0, dtype=float) if coords else to_coords(v0, ref)
    dim = len(x0)
    J = _jacobian(prob, x0)
    H = 2.0 * J.T @ J
    scale = np.max(np.diag(H), initial=0.0)
    if not scale > 0:
        return None
    try:
        chol = np.linalg.cholesky(H + 1e-10 * scale * np.eye(dim))
    except np.linalg.LinAlgError:
        return None
    if np.min(np.diag(chol)) ** 2 < 1e-12 * scale:
        return None

    factor = (chol, True)

    def h0(g):
        return cho_solve(factor, g)

    return h0


# ---------------------------------------------------------------------------
# solvers


def estimate_wls(prob: EstimationProblem, init=None, opts: WlsOptions | None = None) -> EstimateResult:
    """Local quasi-Newton minimisation of the objective from ``init``.

    ``init`` defaults to the flat start; its reference-bus angle is removed
    by a global rotation before optimisation.
    """
    opts = opts or WlsOptions()
    net = prob.net
    ref = net.reference
    v0 = flat_start(net) if init is None else np.array(init, dtype=complex)
    if v0.shape != (net.n,):
        raise ValueError("initial state has the wrong length")
    if v0[ref] != 0:
        v0 = v0 * np.exp(-1j * np.angle(v0[ref]))
    t0 = time.perf_counter()
    try:
        h0 = _preconditioner(prob, v0) if opts.precondition else None
        res = lbfgs(_fun(prob, prob.selection), to_coords(v0, ref), memory=opts.memory,
                    ftol=opts.ftol, gtol=opts.gtol, max_iter=opts.max_iter, c1=opts.c1, h0=h0,
                    refresh=lambda x: _preconditioner(prob, x, coords=True) if opts.precondition else None,
                    refresh_every=opts.refresh_every)
    except DivergenceError as exc:
        raise EstimationError(str(exc), from_coords(exc.x, net.n, ref)) from None
    v = from_coords(res.x, net.n, ref)
    cost = res.f
    if v[ref].real < 0 and not prob.uses_pmu():
        # the objective is invariant under v -> -v without phasor terms
        v = -v
        cost = objective_cost(v, prob)
    return EstimateResult(v, float(cost), res.nit, res.converged, time.perf_counter() - t0,
                          res.message, res.history)


def multistart_starts(net: Network, k: int, seed) -> list[np.ndarray]:
    """Flat start followed by ``k - 1`` random starts.

    Random starts draw magnitudes from ``[0.8, 1.2]`` and angles from
    ``[-30, 30]`` degrees; the reference angle is zero.  The list for ``k``
    is a prefix of the list for any larger ``k`` with the same seed.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    rng = np.random.default_rng(seed)
    starts = [flat_start(net)]
    ref = net.reference
    for _ in range(k - 1):
        mag = rng.uniform(0.8, 1.2, net.n)
        ang = np.deg2rad(rng.uniform(-30.0, 30.0, net.n))
        ang[ref] = 0.0
        starts.append(mag * np.exp(1j * ang))
    return starts


def _threads():
    try:
        return max(1, int(os.environ.get("GRIDSTATE_THREADS", "1")))
    except ValueError:
        return 1


def multistart(prob: EstimationProblem, k: int = 8, seed=0, opts: WlsOptions | None = None,
               extra_starts=(), threads=None) -> EstimateResult:
    """Best of ``estimate_wls`` runs from :func:`multistart_starts`.

    Ties keep the earliest start, so the answer does not depend on the
    number of worker threads.
    """
    starts = multistart_starts(prob.net, k, seed) + [np.asarray(s, dtype=complex) for s in extra_starts]
    threads = _threads() if threads is None else threads
    t0 = time.perf_counter()

    def run(v0):
        try:
            return estimate_wls(prob, v0, opts)
        except EstimationError:
            return None

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(v0) for v0 in starts]
    best = None
    for res in results:
        if res is not None and np.isfinite(res.cost) and (best is None or res.cost < best.cost):
            best = res
    if best is None:
        raise EstimationError("all starts failed")
    total_iters = sum(r.iterations for r in results if r is not None)
    return EstimateResult(best.state, best.cost, total_iters, best.converged,
                          time.perf_counter() - t0, best.message, best.history)


def metrics(est, truth, prob: EstimationProblem | None = None) -> dict:
    """Squared 2-norm distance ``d2``, max-norm distance ``dinf`` and, when a
    problem is given, the objective value at ``est``."""
    est = np.asarray(est, dtype=complex)
    truth = np.asarray(truth, dtype=complex)
    if est.shape != truth.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {truth.shape}")
    diff = np.abs(truth - est)
    out = {"d2": float(np.sum(diff**2)), "dinf": float(diff.max(initial=0.0))}
    if prob is not None:
        out["cost"] = objective_cost(est, prob)
    return out
