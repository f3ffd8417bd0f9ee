"""Tracking the estimate along a time-indexed stream of measurement sets.

Each step predicts the new state from the previous solutions (zero-order
hold, or secant extrapolation once two solutions exist) and corrects it
with a local WLS solve.  A jump in the measurement vector is treated as a
change point: the step falls back to a cold multistart.
"""

from __future__ import annotations

import csv
import io
import os
import re
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .estimation import (
    EstimateResult,
    EstimationError,
    EstimationProblem,
    WlsOptions,
    estimate_wls,
    flat_start,
    multistart,
    objective_cost,
)
from .measurements import MeasurementSet, measure, read_jsonl, standard_plan, write_jsonl
from .network import Network, solve_power_flow
from .noise import add_gaussian_noise

__all__ = [
    "TrackingOptions",
    "TrackerState",
    "StepRecord",
    "TrajectoryReport",
    "TrackingError",
    "detect_change",
    "step",
    "initial_state",
    "run_trajectory",
    "load_stream",
    "write_stream",
    "load_stream_sets",
]

MODES = ("wls-warm", "sdp-warm", "cold")


class TrackingError(RuntimeError):
    def __init__(self, message, step_index=None):
        super().__init__(message if step_index is None else f"step {step_index}: {message}")
        self.step_index = step_index


@dataclass(frozen=True)
class TrackingOptions:
    mode: str = "wls-warm"  # wls-warm | sdp-warm | cold (flat-start WLS every step)
    threshold: float = 0.2  # relative change of the measurement vector that marks a jump
    starts: int = 8  # multistart size for the first step and for restarts
    seed: int = 0
    wls: WlsOptions = field(default_factory=WlsOptions)
    order: int = 2  # SDP mode only
    delta: float = 1e-6

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")


@dataclass
class TrackerState:
    prev_solution: np.ndarray | None = None
    prev_data_digest: np.ndarray | None = None
    step_index: int = 0
    mode: str = "wls-warm"
    before_prev: np.ndarray | None = None  # solution two steps back, for the secant predictor
    prev_moments: np.ndarray | None = None  # SDP mode: last moment vector


@dataclass(frozen=True)
class StepRecord:
    step: int
    cost: float
    d2_prev: float  # squared distance to the previous step's solution (nan at step 0)
    iters: int
    warm: bool
    change_point: bool
    data_change: float  # relative change of the measurement vector
    predictor: str = ""


@dataclass
class TrajectoryReport:
    records: list = field(default_factory=list)
    states: list = field(default_factory=list, repr=False)
    notes: list = field(default_factory=list)

    @property
    def change_points(self) -> list[int]:
        return [r.step for r in self.records if r.change_point]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "cost", "d2_prev", "iters", "warm", "change_point"])
        for r in self.records:
            w.writerow([r.step, f"{r.cost:.12g}", f"{r.d2_prev:.12g}", r.iters, int(r.warm),
                        int(r.change_point)])
        return buf.getvalue()


def detect_change(prev_digest, new_values, threshold: float = 0.2) -> bool:
    """Whether the relative L2 change between two measurement vectors exceeds
    ``threshold``."""
    a = np.asarray(prev_digest, dtype=float)
    b = np.asarray(new_values, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"digest length {a.shape} differs from {b.shape}")
    return _relative_change(a, b) > threshold


def _relative_change(a, b) -> float:
    return float(np.linalg.norm(b - a) / max(np.linalg.norm(a), 1e-12))


def initial_state(opts: TrackingOptions | None = None) -> TrackerState:
    opts = opts or TrackingOptions()
    return TrackerState(mode=opts.mode)


def _predictors(ts: TrackerState):
    out = [("hold", ts.prev_solution)]
    if ts.before_prev is not None:
        out.append(("secant", 2.0 * ts.prev_solution - ts.before_prev))
    return out


def _sdp_step(prob, ts, opts):
    from .sdp import build_moment_sdp, estimation_pop, extract_candidate, solve_sdp

    pop = estimation_pop(prob)
    sdp = build_moment_sdp(pop, opts.order, opts.delta)
    if ts.step_index == 0:
        _check_constraint_map(sdp)
    sol = solve_sdp(sdp, init=ts.prev_moments)
    if sol.status not in ("optimal", "iteration limit"):
        raise EstimationError(f"SDP solve ended with status {sol.status}")
    cand = extract_candidate(sol.y, sdp.basis, pop)
    init = cand if cand is not None else ts.prev_solution
    res = estimate_wls(prob, init, opts.wls)
    return replace(res, iterations=res.iterations + sol.iterations), sol.y, not sol.phase_one


def _check_constraint_map(sdp):
    """Warn when the moment variables are not all pinned by some block."""
    cols = []
    for b in sdp.blocks:
        M = np.zeros((b.size * b.size, sdp.n_moments + 1))
        np.add.at(M, (b.row * b.size + b.col, b.var), b.val)
        cols.append(M[:, 1:])
    rank = np.linalg.matrix_rank(np.vstack(cols))
    if rank < sdp.n_moments:
        warnings.warn(f"SDP constraint map has rank {rank} < {sdp.n_moments}", RuntimeWarning,
                      stacklevel=3)


def step(ts: TrackerState, prob_t: EstimationProblem, opts: TrackingOptions | None = None):
    """Advance the tracker by one measurement set; returns ``(result, record, state)``."""
    opts = opts or TrackingOptions(mode=ts.mode)
    digest = prob_t.ms.real_vector()
    first = ts.prev_solution is None
    if not first and len(ts.prev_solution) != prob_t.net.n:
        raise ValueError("problem does not match the tracked network")
    change = False
    data_change = float("nan")
    if not first:
        if ts.prev_data_digest is None or len(ts.prev_data_digest) != len(digest):
            raise ValueError("measurement layout changed between steps")
        data_change = _relative_change(ts.prev_data_digest, digest)
        change = data_change > opts.threshold

    moments = ts.prev_moments
    predictor = ""
    if first or change:
        res = multistart(prob_t, opts.starts, opts.seed, opts.wls)
        warm = False
        predictor = "restart"
        if opts.mode == "sdp-warm":
            moments = None
    elif opts.mode == "cold":
        res = estimate_wls(prob_t, flat_start(prob_t.net), opts.wls)
        warm = False
        predictor = "flat"
    elif opts.mode == "sdp-warm":
        res, moments, warm = _sdp_step(prob_t, ts, opts)
        predictor = "moments"
    else:
        cands = _predictors(ts)
        costs = [objective_cost(v, prob_t) for _, v in cands]
        k = int(np.argmin(costs))  # ties keep the zero-order hold
        predictor, v0 = cands[k]
        res = estimate_wls(prob_t, v0, opts.wls)
        warm = True

    d2 = float("nan") if first else float(np.sum(np.abs(res.state - ts.prev_solution) ** 2))
    rec = StepRecord(ts.step_index, float(res.cost), d2, int(res.iterations), bool(warm), bool(change),
                     data_change, predictor)
    new = TrackerState(
        prev_solution=res.state,
        prev_data_digest=digest,
        step_index=ts.step_index + 1,
        mode=ts.mode,
        # a change point breaks the secant: the old trajectory no longer applies
        before_prev=None if (first or change) else ts.prev_solution,
        prev_moments=moments,
    )
    return res, rec, new


def run_trajectory(stream, net: Network, opts: TrackingOptions | None = None,
                   weights=None) -> TrajectoryReport:
    """Fold :func:`step` over ``stream`` (a sequence of measurement sets)."""
    opts = opts or TrackingOptions()
    stream = list(stream)
    if not stream:
        raise ValueError("empty stream")
    ts = initial_state(opts)
    report = TrajectoryReport()
    for k, ms in enumerate(stream):
        prob = EstimationProblem(net, ms, weights)
        try:
            res, rec, ts = step(ts, prob, opts)
        except (EstimationError, ValueError) as exc:
            raise TrackingError(str(exc), k) from exc
        report.records.append(rec)
        report.states.append(res.state)
        if _multi_valued(rec, res.state):
            report.notes.append(f"step {k}: possible multi-valued point "
                                f"(displacement {rec.d2_prev:.3g} without a change point)")
    return report


def _multi_valued(rec: StepRecord, v) -> bool:
    """Large solution displacement although the data barely moved."""
    if rec.change_point or not np.isfinite(rec.d2_prev):
        return False
    rel_move = np.sqrt(rec.d2_prev) / max(np.linalg.norm(v), 1e-12)
    return rel_move > 1e-3 and rel_move > 10.0 * rec.data_change


# ---------------------------------------------------------------------------
# streams


def load_stream(net: Network, steps: int = 20, amplitude: float = 0.01, seed=0, plan=None,
                jump_at: int | None = None, jump_scale: float = 2.0, noise: float = 0.0):
    """Measurement sets of a network whose loads drift by up to ``amplitude``
    (relative) per step.

    ``jump_at`` multiplies the load level by ``jump_scale`` from that step
    on, an outage-scale discontinuity.  ``noise`` > 0 adds Gaussian noise with
    that relative scale.  Returns ``(stream, truths, load_levels)``.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    rng = np.random.default_rng(seed)
    plan = standard_plan(net) if plan is None else plan
    level = 1.0
    stream, truths, levels = [], [], []
    v = None
    for k in range(steps):
        if k > 0:
            level *= 1.0 + amplitude * rng.uniform(-1.0, 1.0)
        scale = level * (jump_scale if jump_at is not None and k >= jump_at else 1.0)
        v = solve_power_flow(net.with_loads(scale), init=v)
        ms = measure(v, net, plan)
        if noise > 0:
            ms = add_gaussian_noise(ms, seed=(seed, k), scale=noise)
        stream.append(ms)
        truths.append(v)
        levels.append(scale)
    return stream, truths, levels


_STEP_FILE = re.compile(r"^step_(\d+)\.jsonl$")


def write_stream(stream, directory) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for k, ms in enumerate(stream):
        path = os.path.join(directory, f"step_{k}.jsonl")
        write_jsonl(ms, path)
        paths.append(path)
    return paths


def load_stream_sets(directory) -> list[MeasurementSet]:
    """Read ``step_<k>.jsonl`` files in numeric order of ``k``."""
    found = []
    for name in os.listdir(directory):
        hit = _STEP_FILE.match(name)
        if hit:
            found.append((int(hit.group(1)), name))
    if not found:
        raise ValueError(f"no step_<k>.jsonl files in {directory}")
    found.sort()
    return [read_jsonl(os.path.join(directory, name)) for _, name in found]
