"""Limited-memory BFGS with a backtracking Armijo line search."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = ["LbfgsResult", "DivergenceError", "lbfgs"]


class DivergenceError(RuntimeError):
    """The objective became non-finite; ``x`` holds the last finite iterate."""

    def __init__(self, message, x):
        super().__init__(message)
        self.x = x


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    nit: int
    converged: bool
    message: str
    history: list = field(default_factory=list)


def _two_loop(g, memory, h0=None):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(memory):
        a = rho * s.dot(q)
        alphas.append(a)
        q -= a * y
    if h0 is not None:
        q = h0(q)
    elif memory:
        s, y, _ = memory[-1]
        q *= s.dot(y) / y.dot(y)
    for (s, y, rho), a in zip(memory, reversed(alphas)):
        b = rho * y.dot(q)
        q += (a - b) * s
    return -q


def lbfgs(fun, x0, *, memory=10, ftol=1e-6, gtol=1e-6, max_iter=5000, c1=1e-4,
          max_backtracks=60, h0=None, refresh=None, refresh_every=0) -> LbfgsResult:
    """Minimise ``fun`` (returning ``(f, grad)``) from ``x0``.

    Stops when ``(f_k - f_{k+1}) / max(|f_k|, |f_{k+1}|, 1) <= ftol``, when
    ``max|g_i| <= gtol``, or after ``max_iter`` iterations.  ``h0``
    optionally applies a fixed initial inverse-Hessian approximation (a
    preconditioner) in place of the usual scalar scaling.  Accepted iterates never increase ``f``.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not np.isfinite(f):
        raise DivergenceError("objective is not finite at the initial point", x)
    mem = deque(maxlen=memory)
    history = [f]
    if np.max(np.abs(g), initial=0.0) <= gtol:
        return LbfgsResult(x, f, g, 0, True, "gradient tolerance", history)

    for it in range(1, max_iter + 1):
        if refresh is not None and refresh_every and it % refresh_every == 0:
            h0 = refresh(x) or h0
        d = _two_loop(g, mem, h0)
        slope = g.dot(d)
        if (not mem and h0 is None) or slope >= 0:
            # restart along the (scaled) steepest-descent direction
            mem.clear()
            d = -g / max(np.linalg.norm(g), 1.0)
            slope = g.dot(d)
        step = 1.0
        finite_seen = False
        for _ in range(max_backtracks):
            x_new = x + step * d
            f_new, g_new = fun(x_new)
            finite_seen |= bool(np.isfinite(f_new))
            if np.isfinite(f_new) and f_new <= f + c1 * step * slope:
                break
            step *= 0.5
        else:
            if not finite_seen:
                raise DivergenceError("objective not finite along the search direction", x)
            # no decrease possible at working precision
            return LbfgsResult(x, f, g, it - 1, False, "line search stalled", history)
        s, y = x_new - x, g_new - g
        sy = s.dot(y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            mem.append((s, y, 1.0 / sy))
        f_old = f
        x, f, g = x_new, f_new, g_new
        history.append(f)
        if (f_old - f) / max(abs(f_old), abs(f), 1.0) <= ftol:
            return LbfgsResult(x, f, g, it, True, "function tolerance", history)
        if np.max(np.abs(g)) <= gtol:
            return LbfgsResult(x, f, g, it, True, "gradient tolerance", history)
    return LbfgsResult(x, f, g, max_iter, False, "iteration limit", history)
