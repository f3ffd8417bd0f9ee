"""Robust estimation by measurement selection.

Each measurement entry (or, in grouped mode, each sensor device) carries a
binary selection variable.  PMU entries weigh 2 in the budget because they
hold two real values.  :func:`solve_robust` searches the selections with a
depth-first branch-and-bound; :func:`enumerate_oracle` checks every feasible
selection and serves as the reference at small sizes.  Both evaluate a
selection with the same memoised multistart solve, so their costs agree
exactly whenever the search is complete.

A selection only counts when it leaves the state observable (full-rank
residual Jacobian at its estimate).  Dropping every reading that pins a bus
down would otherwise give a low cost with an arbitrary voltage there.
"""

from __future__ import annotations

import itertools
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .estimation import (
    EstimateResult,
    EstimationProblem,
    WlsOptions,
    estimate_wls,
    multistart,
    objective_terms,
    observable,
)
from .measurements import KINDS

__all__ = [
    "SelectionMask",
    "RobustOptions",
    "RobustResult",
    "LassoResult",
    "selection_units",
    "solve_robust",
    "enumerate_oracle",
    "solve_lasso",
    "budget_for",
]


@dataclass(frozen=True)
class SelectionMask:
    """Per-entry selection with the budget it was built for.

    ``beta`` and ``gamma`` view the PMU and SCADA parts respectively.
    """

    selected: tuple
    is_pmu: tuple
    budget: int

    @property
    def array(self) -> np.ndarray:
        return np.array(self.selected, dtype=float)

    @property
    def beta(self) -> np.ndarray:
        return np.array([s for s, p in zip(self.selected, self.is_pmu) if p], dtype=bool)

    @property
    def gamma(self) -> np.ndarray:
        return np.array([s for s, p in zip(self.selected, self.is_pmu) if not p], dtype=bool)

    @property
    def weight(self) -> int:
        return 2 * int(self.beta.sum()) + int(self.gamma.sum())

    def to_list(self) -> list[int]:
        return [int(s) for s in self.selected]


@dataclass(frozen=True)
class RobustOptions:
    starts: int = 4
    seed: int = 0
    budget_mode: str = "eq"  # "eq": weight == d, "ge": weight >= d
    grouped: bool = False
    max_nodes: int = 100
    time_limit: float | None = None
    gap: float = 1e-6
    tie_tol: float = 1e-9
    relax_rounds: int = 10
    require_observable: bool = True
    wls: WlsOptions = field(default_factory=WlsOptions)

    def __post_init__(self):
        if self.budget_mode not in ("eq", "ge"):
            raise ValueError("budget_mode must be 'eq' or 'ge'")
        if self.starts < 1 or self.max_nodes < 1:
            raise ValueError("starts and max_nodes must be positive")


@dataclass
class RobustResult:
    state: np.ndarray
    mask: SelectionMask
    cost: float
    nodes_explored: int
    bound_gap: float
    wall_time: float = 0.0
    complete: bool = True
    message: str = ""


def budget_for(prob: EstimationProblem, factor: float) -> int:
    """``floor(factor * L)`` with ``L`` the real measurement count."""
    return int(np.floor(factor * prob.ms.size + 1e-9))


def selection_units(prob: EstimationProblem, grouped=False) -> list[list[int]]:
    """Entry indices per selection variable.

    Ungrouped, every entry is its own unit.  Grouped, entries measured by the
    same device share one unit: all bus quantities of a bus, and the branch
    quantities of each branch end.
    """
    if not grouped:
        return [[j] for j in range(len(prob.ms))]
    keys = {}
    for j, e in enumerate(prob.ms):
        if KINDS[e.kind][0] == "bus":
            key = ("bus", e.target)
        else:
            key = ("to" if e.kind in ("pt", "qt", "pmu_it") else "from", e.target)
        keys.setdefault(key, []).append(j)
    return list(keys.values())


class _Evaluator:
    """Memoised multistart costs of selections and of partial selections."""

    def __init__(self, prob, units, opts: RobustOptions):
        self.prob = prob
        self.units = units
        self.opts = opts
        self.entry_weight = np.where(prob.is_pmu, 2, 1)
        self.unit_weight = np.array([int(self.entry_weight[u].sum()) for u in units])
        self._masks = {}
        self._subsets = {}
        self._observable = {}
        self.solves = 0

    def entry_selection(self, unit_sel) -> np.ndarray:
        sel = np.zeros(len(self.prob.ms))
        for u, s in zip(self.units, unit_sel):
            sel[u] = s
        return sel

    def mask_cost(self, key: tuple) -> EstimateResult:
        if key not in self._masks:
            self.solves += 1
            sub = self.prob.with_selection(self.entry_selection(key))
            self._masks[key] = multistart(sub, self.opts.starts, self.opts.seed, self.opts.wls)
        return self._masks[key]

    def observable(self, key: tuple) -> bool:
        if not self.opts.require_observable:
            return True
        if key not in self._observable:
            sub = self.prob.with_selection(self.entry_selection(key))
            self._observable[key] = observable(sub, self.mask_cost(key).state)
        return self._observable[key]

    def subset_cost(self, key: tuple, hints=()) -> float:
        """Multistart minimum of the terms in ``key`` alone (a bound for
        every selection containing them)."""
        if int(self.unit_weight @ np.array(key)) <= self.prob.dim:
            # no more real equations than unknowns: 0 is the natural bound
            return 0.0
        if key not in self._subsets:
            self.solves += 1
            sub = self.prob.with_selection(self.entry_selection(key))
            res = multistart(sub, self.opts.starts, self.opts.seed, self.opts.wls, extra_starts=hints)
            self._subsets[key] = res.cost
        return self._subsets[key]

    def unit_terms(self, v) -> np.ndarray:
        t = objective_terms(v, self.prob)
        return np.array([t[u].sum() for u in self.units])


def _achievable(need, ones, twos, mode):
    """Whether free units of weight 1 (``ones``) and 2 (``twos``), together
    with heavier units already accounted for, can add exactly ``need``."""
    if need < 0:
        return mode == "ge"
    if mode == "ge":
        return need <= ones + 2 * twos
    return any(0 <= need - 2 * j <= ones for j in range(min(twos, need // 2) + 1))


def _feasible(weights, fixed, budget, mode):
    """Budget feasibility of a partial assignment (``-1`` marks free)."""
    need = budget - int(weights[fixed == 1].sum())
    free = weights[fixed == -1]
    if np.all(free <= 2):
        return _achievable(need, int((free == 1).sum()), int((free == 2).sum()), mode)
    # grouped units can be heavier: subset-sum over the free weights
    if mode == "ge":
        return need <= int(free.sum())
    reach = {0}
    for w in free:
        reach |= {r + int(w) for r in reach if r + w <= need}
    return need in reach


def _fill(weights, fixed, budget, mode, terms, fractional):
    """Cheapest completion of ``fixed``: free units in order of term per
    weight.  The fractional variant may take part of one unit; the integral
    variant skips units that overshoot an equality budget."""
    sel = np.where(fixed == 1, 1.0, 0.0)
    need = budget - float(weights[fixed == 1].sum())
    free = np.flatnonzero(fixed == -1)
    order = free[np.lexsort((free, terms[free] / weights[free]))]
    for j in order:
        if need <= 0:
            break
        w = weights[j]
        if w <= need:
            sel[j] = 1.0
            need -= w
        elif fractional:
            sel[j] = need / w
            need = 0
        elif mode == "ge":
            sel[j] = 1.0
            need -= w
    if need > 0 and not fractional:
        return None
    return sel


def _eliminate(ev, budget, mode, v):
    """First incumbent by backward elimination: re-estimate, then drop the
    unit with the largest term per weight, until the budget is reached."""
    weights = ev.unit_weight
    kept = np.ones(len(weights), dtype=int)
    opts = ev.opts
    while True:
        sub = ev.prob.with_selection(ev.entry_selection(kept))
        v = multistart(sub, opts.starts, opts.seed, opts.wls, extra_starts=[v]).state
        if mode == "eq" and int(weights @ kept) == budget:
            break
        score = ev.unit_terms(v) / weights
        drop = None
        for j in np.lexsort((np.arange(len(kept)), -score)):
            if not kept[j]:
                continue
            fixed = np.where(kept == 1, -1, 0)
            fixed[j] = 0
            if int(weights[fixed == -1].sum()) >= budget and _feasible(weights, fixed, budget, mode):
                drop = j
                break
        if drop is None:
            break
        kept[drop] = 0
    return tuple(int(k) for k in kept)


def _check_budget(prob, budget, weights, mode):
    total = int(weights.sum())
    if budget <= 0 or budget > total:
        raise ValueError(f"budget {budget} outside (0, {total}]")
    fixed = np.full(len(weights), -1)
    if not _feasible(weights, fixed, budget, mode):
        raise ValueError(f"no selection has weight exactly {budget}")
    if budget <= prob.dim:
        warnings.warn(f"budget {budget} does not exceed the {prob.dim} unknowns; "
                      "the state may not be observable", RuntimeWarning, stacklevel=3)


def _better(cost, key, best_cost, best_key, tol):
    if best_key is None or cost < best_cost - tol:
        return True
    return cost <= best_cost + tol and key < best_key


class _Incumbent:
    """Best observable selection, with the best unobservable one as fallback."""

    def __init__(self, ev, tol):
        self.ev, self.tol = ev, tol
        self.key, self.cost, self.state = None, np.inf, None
        self.fallback, self.fallback_cost = None, np.inf

    def consider(self, key):
        res = self.ev.mask_cost(key)
        if not self.ev.observable(key):
            if _better(res.cost, key, self.fallback_cost, self.fallback, self.tol):
                self.fallback, self.fallback_cost = key, res.cost
        elif _better(res.cost, key, self.cost, self.key, self.tol):
            self.key, self.cost, self.state = key, res.cost, res.state

    def final(self, message):
        if self.key is not None:
            return self.key, message
        if self.fallback is None:
            raise RuntimeError("no feasible selection found")
        warnings.warn("no selection within the budget keeps the state observable",
                      RuntimeWarning, stacklevel=3)
        return self.fallback, message + "; state not observable"


def _result(ev, key, budget, nodes, gap, t0, complete, message):
    res = ev.mask_cost(key)
    sel = ev.entry_selection(key).astype(bool)
    mask = SelectionMask(tuple(bool(s) for s in sel), tuple(bool(p) for p in ev.prob.is_pmu), budget)
    return RobustResult(res.state, mask, res.cost, nodes, gap, time.perf_counter() - t0, complete,
                        message)


def solve_robust(prob: EstimationProblem, d: int, opts: RobustOptions | None = None) -> RobustResult:
    """Best selection of total weight ``d`` (at least ``d`` in ``"ge"`` mode).

    Nodes are bounded by the multistart minimum of their fixed-in terms; the
    relaxed selection at a node comes from alternating a fractional knapsack
    step over the free units with a weighted least-squares state step.
    Branching takes the most fractional unit, ties broken by larger term.
    Equal costs (within ``tie_tol``) resolve to the lexicographically
    smallest selection.  When ``max_nodes`` or ``time_limit`` stops the
    search early, the best selection found is returned with ``complete``
    false and ``bound_gap`` set to the incumbent minus the smallest open
    bound.
    """
    opts = opts or RobustOptions()
    t0 = time.perf_counter()
    units = selection_units(prob, opts.grouped)
    ev = _Evaluator(prob, units, opts)
    weights = ev.unit_weight
    mode = opts.budget_mode
    _check_budget(prob, d, weights, mode)
    U = len(units)
    tol = opts.tie_tol

    inc = _Incumbent(ev, tol)
    consider = inc.consider

    def relax(fixed, v):
        beta = None
        for _ in range(opts.relax_rounds):
            new = _fill(weights, fixed, d, mode, ev.unit_terms(v), fractional=True)
            if beta is not None and np.array_equal(new, beta):
                break
            beta = new
            v = estimate_wls(prob.with_selection(ev.entry_selection(beta)), v, opts.wls).state
        return beta, v

    def forced(fixed):
        """Assignment with every free unit forced by the budget, else None."""
        free = fixed == -1
        need = d - int(weights[fixed == 1].sum())
        out = fixed.copy()
        if need <= 0 or not free.any():
            # nothing more may be added (eq) or needs to be (ge): extra
            # terms cannot lower the cost and zeros sort first
            out[free] = 0
            return out
        if mode == "eq" and need == int(weights[free].sum()):
            out[free] = 1
            return out
        return None

    root = np.full(U, -1)
    start = forced(root)
    nodes = 0
    if start is not None:
        consider(tuple(int(s) for s in start))
        key, msg = inc.final("selection forced by budget")
        return _result(ev, key, d, 1, 0.0, t0, True, msg)

    v0 = multistart(prob, opts.starts, opts.seed, opts.wls).state
    consider(_eliminate(ev, d, mode, v0))
    # stack entries: (fixed assignment, parent bound, warm state)
    stack = [(root, 0.0, v0)]
    open_bounds = []
    stopped = None
    while stack:
        if nodes >= opts.max_nodes:
            stopped = "node limit"
        elif opts.time_limit is not None and time.perf_counter() - t0 > opts.time_limit:
            stopped = "time limit"
        if stopped:
            open_bounds = [b for _, b, _ in stack]
            break
        fixed, parent_bound, v = stack.pop()
        nodes += 1
        leaf = forced(fixed)
        if leaf is not None:
            consider(tuple(int(s) for s in leaf))
            continue
        hints = [inc.state] if inc.state is not None else []
        key_in = tuple(int(s == 1) for s in fixed)
        bound = max(parent_bound, ev.subset_cost(key_in, hints))
        if inc.key is not None and bound > inc.cost + tol:
            continue
        beta, v = relax(fixed, v)
        terms = ev.unit_terms(v)
        rounded = _fill(weights, fixed, d, mode, terms, fractional=False)
        if rounded is not None:
            consider(tuple(int(s) for s in rounded))
        free = np.flatnonzero(fixed == -1)
        frac = np.minimum(beta[free], 1 - beta[free])
        j = free[np.lexsort((free, -terms[free], -frac))[0]]
        children = []
        for value in (1, 0):
            child = fixed.copy()
            child[j] = value
            if _feasible(weights, child, d, mode):
                children.append((child, bound, v))
        # explore the side the relaxation prefers first
        if beta[j] < 0.5:
            children.reverse()
        stack.extend(reversed(children))

    if stopped:
        key, msg = inc.final(stopped)
        cost = ev.mask_cost(key).cost
        gap = max(cost - min(open_bounds + [cost]), 0.0)
        return _result(ev, key, d, nodes, gap, t0, False, msg)
    key, msg = inc.final("search complete")
    return _result(ev, key, d, nodes, 0.0, t0, True, msg)


def enumerate_oracle(prob: EstimationProblem, d: int, opts: RobustOptions | None = None,
                     max_units=20) -> RobustResult:
    """Evaluate every feasible selection; the exact reference for small
    instances.  Ties resolve as in :func:`solve_robust`."""
    opts = opts or RobustOptions()
    t0 = time.perf_counter()
    units = selection_units(prob, opts.grouped)
    if len(units) > max_units:
        raise ValueError(f"{len(units)} selection variables exceed the enumeration limit {max_units}")
    ev = _Evaluator(prob, units, opts)
    weights = ev.unit_weight
    _check_budget(prob, d, weights, opts.budget_mode)
    inc = _Incumbent(ev, opts.tie_tol)
    count = 0
    for key in itertools.product((0, 1), repeat=len(units)):
        w = int(weights @ np.array(key))
        if (opts.budget_mode == "eq" and w != d) or w < d:
            continue
        count += 1
        inc.consider(key)
    key, msg = inc.final("enumeration")
    return _result(ev, key, d, count, 0.0, t0, True, msg)


@dataclass
class LassoResult(EstimateResult):
    selection: np.ndarray | None = None
    objective: float = 0.0


def solve_lasso(prob: EstimationProblem, r: float, init=None, max_rounds=50,
                opts: WlsOptions | None = None) -> LassoResult:
    """Alternate a state step and a closed-form selection step.

    The selection step minimises ``sum_j s_j t_j + r sum_j c_j (1 - s_j)``
    over ``s in [0, 1]``, where ``t_j`` is the weighted term of entry ``j``
    and ``c_j`` its budget weight: an entry is dropped when ``t_j >= r c_j``.
    ``cost`` is the selected least-squares part; ``objective`` adds the
    penalty.
    """
    if not r > 0:
        raise ValueError("the regularisation r must be positive")
    t0 = time.perf_counter()
    c = np.where(prob.is_pmu, 2.0, 1.0)
    if init is None:
        res = estimate_wls(prob, None, opts)
    else:
        res = estimate_wls(prob, init, opts)
    v = res.state
    iters = res.iterations
    sel = None
    converged = False
    for _ in range(max_rounds):
        terms = objective_terms(v, prob)
        new = np.where(terms >= r * c, 0.0, 1.0)
        if sel is not None and np.array_equal(new, sel):
            converged = True
            break
        sel = new
        res = estimate_wls(prob.with_selection(sel), v, opts)
        v = res.state
        iters += res.iterations
    terms = objective_terms(v, prob)
    cost = float(sel @ terms)
    objective = cost + r * float(c @ (1 - sel))
    return LassoResult(v, cost, iters, converged, time.perf_counter() - t0,
                       "fixed point" if converged else "round limit", selection=sel,
                       objective=objective)
