"""Experiment harness: run estimators over seeds and summarise their scores.

Every run produces one flat record (JSON-serialisable); the summary table
is computed from those records only, so each cell can be recomputed from
the raw output.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .estimation import (
    EstimationError,
    EstimationProblem,
    estimate_wls,
    flat_start,
    metrics,
    multistart,
    _threads,
)
from .measurements import MeasurementSet, measure, pmu_plan, standard_plan
from .network import Network, load_case, solve_power_flow
from .noise import add_gaussian_noise, inject_faults
from .robust import RobustOptions, budget_for, solve_lasso, solve_robust

__all__ = [
    "ExperimentConfig",
    "ConfigError",
    "parse_estimator",
    "parse_seeds",
    "simulate_measurements",
    "run_once",
    "run_benchmark",
    "summarize",
    "summary_csv",
    "records_jsonl",
    "D_FACTORS",
]

NOISES = ("none", "gaussian", "faulty")
ESTIMATORS = ("wls", "multistart", "robust", "lasso", "sdp")
# fault probability -> default budget factor
D_FACTORS = {0.01: 0.99, 0.1: 0.9}
ROBUST_MAX_BUSES = 57
GROUP_ABOVE = 200  # selection variables beyond which robust mode groups by device


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class ExperimentConfig:
    case: str = "case14"
    noise: str = "none"
    p_f: float | None = None
    estimator: str = "wls"
    seeds: tuple = (0,)
    time_limit: float | None = None
    d_factor: float | None = None
    order: int = 2
    delta: float = 1e-6
    pmu_buses: tuple = ()

    def __post_init__(self):
        if self.noise not in NOISES:
            raise ConfigError(f"noise must be one of {NOISES}")
        if self.noise == "faulty":
            if self.p_f is None or not 0 <= self.p_f <= 1:
                raise ConfigError("faulty noise needs --pf in [0, 1]")
        if self.d_factor is not None and not 0 < self.d_factor <= 1:
            raise ConfigError("--d-factor must lie in (0, 1]")
        if not self.delta > 0:
            raise ConfigError("--delta must be positive")
        if self.order < 1:
            raise ConfigError("--order must be at least 1")
        for label in self.estimators:
            parse_estimator(label)

    @property
    def estimators(self) -> list[str]:
        return [s.strip() for s in self.estimator.split(",") if s.strip()]

    def budget_factor(self) -> float:
        if self.d_factor is not None:
            return self.d_factor
        if self.noise == "faulty" and self.p_f in D_FACTORS:
            return D_FACTORS[self.p_f]
        if self.noise == "faulty":
            return max(1.0 - float(self.p_f), 1e-9)
        return 1.0


def parse_estimator(label: str):
    """``name`` or ``name:param`` with ``param`` an integer (multistart
    starts) or a real (lasso ``r``)."""
    name, _, param = label.partition(":")
    if name not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")
    if not param:
        return name, None
    try:
        value = int(param) if name == "multistart" else float(param)
    except ValueError:
        raise ConfigError(f"bad parameter in estimator {label!r}") from None
    if value <= 0:
        raise ConfigError(f"estimator parameter must be positive in {label!r}")
    return name, value


def parse_seeds(text: str) -> tuple:
    """``"3"``, ``"0,2,5"`` or an inclusive range ``"0..9"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = tuple(range(int(lo), int(hi) + 1))
        else:
            seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}") from None
    if not seeds:
        raise ConfigError("empty seed list")
    return seeds


def _load(case: str) -> Network:
    try:
        return load_case(case)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load case {case!r}: {exc}") from None


def simulate_measurements(net: Network, v, cfg: ExperimentConfig, seed) -> MeasurementSet:
    plan = standard_plan(net)
    if cfg.pmu_buses:
        plan = plan + pmu_plan(net, cfg.pmu_buses)
    clean = measure(v, net, plan)
    if cfg.noise == "gaussian":
        return add_gaussian_noise(clean, seed)
    if cfg.noise == "faulty":
        return inject_faults(clean, cfg.p_f, seed)
    return clean


def _estimate(prob: EstimationProblem, label: str, cfg: ExperimentConfig, seed) -> dict:
    name, param = parse_estimator(label)
    out = {}
    if name == "wls":
        res = estimate_wls(prob, flat_start(prob.net))
    elif name == "multistart":
        res = multistart(prob, int(param or 16), seed)
    elif name == "lasso":
        res = solve_lasso(prob, float(param or 1.0))
        out["dropped"] = int((res.selection == 0).sum())
    elif name == "robust":
        if prob.n > ROBUST_MAX_BUSES:
            raise ConfigError(f"robust mode is limited to {ROBUST_MAX_BUSES} buses")
        factor = float(param) if param is not None else cfg.budget_factor()
        if factor > 1:
            d = int(factor)
        else:
            d = budget_for(prob, factor)
        opts = RobustOptions(seed=seed, time_limit=cfg.time_limit, grouped=len(prob.ms) > GROUP_ABOVE)
        try:
            r = solve_robust(prob, d, opts)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        out.update(budget=d, nodes=r.nodes_explored, complete=r.complete, bound_gap=r.bound_gap,
                   dropped=int(len(r.mask.selected) - sum(r.mask.selected)))
        return {**out, "state": r.state, "cost": r.cost, "iterations": r.nodes_explored,
                "converged": r.complete}
    else:
        return _estimate_sdp(prob, cfg)
    return {**out, "state": res.state, "cost": res.cost, "iterations": res.iterations,
            "converged": res.converged}


def _estimate_sdp(prob, cfg):
    from .sdp import build_moment_sdp, estimation_pop, extract_candidate, solve_sdp

    pop = estimation_pop(prob)
    try:
        sdp = build_moment_sdp(pop, cfg.order, cfg.delta)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    sol = solve_sdp(sdp)
    if sol.status in ("failed", "infeasible", "unbounded"):
        raise EstimationError(f"SDP solve ended with status {sol.status}")
    cand = extract_candidate(sol.y, sdp.basis, pop)
    res = estimate_wls(prob, cand if cand is not None else flat_start(prob.net))
    return {"state": res.state, "cost": res.cost, "iterations": sol.iterations + res.iterations,
            "converged": res.converged, "sdp_bound": sol.bound, "sdp_status": sol.status,
            "rank_one": cand is not None}


def run_once(cfg: ExperimentConfig, seed, label: str, net=None, measurements=None,
             truth=None) -> dict:
    """One seed of one estimator.  Estimation failures are recorded, not raised."""
    net = net if net is not None else _load(cfg.case)
    v = truth if truth is not None else solve_power_flow(net)
    ms = measurements if measurements is not None else simulate_measurements(net, v, cfg, seed)
    prob = EstimationProblem(net, ms)
    rec = {"case": cfg.case, "noise": cfg.noise, "p_f": cfg.p_f, "estimator": label, "seed": seed,
           "n_measurements": ms.size, "n_faulty": int(ms.fault_mask.sum())}
    t0 = time.perf_counter()
    try:
        out = _estimate(prob, label, cfg, seed)
    except EstimationError as exc:
        rec.update(status="failed", error=str(exc), runtime=time.perf_counter() - t0)
        return rec
    rec["runtime"] = time.perf_counter() - t0
    state = out.pop("state")
    m = metrics(state, v)
    rec.update(status="ok", cost=float(out.pop("cost")), d2=m["d2"], dinf=m["dinf"], **out)
    rec["state"] = [[float(z.real), float(z.imag)] for z in state]
    return rec


def run_benchmark(cfg: ExperimentConfig) -> list[dict]:
    """Records for every (estimator, seed) pair, in estimator then seed order.

    Seeds run on ``GRIDSTATE_THREADS`` workers; the output order does not
    depend on the worker count.
    """
    if len(cfg.seeds) < 2:
        raise ConfigError("a benchmark needs at least two seeds (std is undefined otherwise)")
    net = _load(cfg.case)
    v = solve_power_flow(net)
    jobs = [(label, seed) for label in cfg.estimators for seed in cfg.seeds]

    def run(job):
        label, seed = job
        return run_once(cfg, seed, label, net=net, truth=v)

    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(run, jobs))
    return [run(j) for j in jobs]


def _mean_std(values):
    if not values:
        return math.nan, math.nan
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else math.nan


def summarize(records: list[dict]) -> list[dict]:
    """Per-estimator mean and sample std over seeds of cost, d2, dinf and runtime."""
    rows = []
    order = []
    for r in records:
        if r["estimator"] not in order:
            order.append(r["estimator"])
    for label in order:
        runs = [r for r in records if r["estimator"] == label]
        ok = [r for r in runs if r["status"] == "ok"]
        row = {"case": runs[0]["case"], "noise": runs[0]["noise"], "p_f": runs[0]["p_f"],
               "estimator": label, "seeds": len(runs), "failures": len(runs) - len(ok)}
        for key in ("cost", "d2", "dinf", "runtime"):
            # runtimes are absent from records written without timing
            row[key + "_mean"], row[key + "_std"] = _mean_std([r[key] for r in ok if key in r])
        rows.append(row)
    return rows


def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6g}"
    return str(x)


def summary_csv(rows: list[dict], timing=False) -> str:
    cols = ["case", "noise", "p_f", "estimator", "seeds", "failures", "cost_mean", "cost_std",
            "d2_mean", "d2_std", "dinf_mean", "dinf_std"]
    if timing:
        cols += ["runtime_mean", "runtime_std"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([_num(row[c]) for c in cols])
    return buf.getvalue()


def records_jsonl(records: list[dict], timing=False) -> str:
    """Raw records as JSON lines; runtimes only with ``timing``."""
    lines = []
    for r in records:
        r = dict(r)
        if not timing:
            r.pop("runtime", None)
        lines.append(json.dumps(r, sort_keys=True))
    return "\n".join(lines) + "\n"
