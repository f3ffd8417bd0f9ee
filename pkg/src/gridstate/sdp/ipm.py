"""Barrier interior-point method for block-diagonal SDPs.

Solves ``min c^T y`` s.t. ``S_b = F_b(y) = F_b0 + sum_i y_i F_bi`` PSD for
every block.  Iterates stay strictly feasible: a phase-I problem
``min s`` s.t. ``F_b(y) + s I`` PSD finds an interior point, then damped
Newton steps follow the central path of ``t c^T y - sum_b log det S_b``.

Equality bands make the feasible set very thin, so the Newton system is
solved through a QR factorisation of its square root ``J`` (``H = J^T J``)
rather than a Cholesky factorisation of ``H``.  ``X_b = S_b^{-1} / t`` is
the dual estimate at each centred point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, solve_triangular

from .relax import SdpProblem

__all__ = ["SdpSolution", "solve_sdp"]

CENTRE_STEPS = 50  # Newton steps per centring before moving on


@dataclass
class SdpSolution:
    y: np.ndarray  # full moment vector, y[0] = 1
    bound: float  # c^T y at the final (feasible) iterate
    dual_bound: float  # bound minus the barrier gap N / t
    status: str  # optimal | infeasible | unbounded | iteration limit | failed
    iterations: int  # Newton steps over both phases
    gap: float
    primal_infeasibility: float  # residual of <F_i, X> = c_i for the dual estimate
    dual_infeasibility: float
    X: list
    S: list
    phase_one: bool = True  # False when ``init`` was already strictly feasible

    @property
    def moments(self) -> dict:
        return self._moments

    def with_basis(self, basis):
        self._moments = {a: float(v) for a, v in zip(basis, self.y)}
        return self


class _Block:
    """Dense data of one block restricted to the variables it uses."""

    def __init__(self, blk, m):
        s = blk.size
        self.s = s
        F0 = np.zeros((s, s))
        const = blk.var == 0
        np.add.at(F0, (blk.row[const], blk.col[const]), blk.val[const])
        self.F0 = F0 + np.triu(F0, 1).T
        free = ~const
        self.vars = np.unique(blk.var[free]) - 1
        pos = {v: k for k, v in enumerate(self.vars)}
        A = np.zeros((len(self.vars), s, s))
        k = np.array([pos[v - 1] for v in blk.var[free]], dtype=int)
        np.add.at(A, (k, blk.row[free], blk.col[free]), blk.val[free])
        diag = np.arange(s)
        upper = A.copy()
        upper[:, diag, diag] = 0
        self.A = A + np.transpose(upper, (0, 2, 1))  # (k, s, s) symmetric slices

    def F(self, y):
        return self.F0 + np.tensordot(y[self.vars], self.A, axes=1)

    def with_slack(self, index):
        """Copy with an extra variable ``index`` entering as ``+ I``."""
        out = object.__new__(_Block)
        out.s, out.F0 = self.s, self.F0
        out.vars = np.r_[self.vars, index]
        out.A = np.concatenate([self.A, np.eye(self.s)[None]])
        return out


def _chol(S):
    try:
        return np.linalg.cholesky(S)
    except LinAlgError:
        return None


class _Barrier:
    """``t c^T y - sum log det F_b(y)`` with Newton steps in square-root form."""

    def __init__(self, blocks, c):
        self.blocks = blocks
        self.c = c
        self.m = len(c)
        self.N = sum(b.s for b in blocks)

    def value(self, y, t):
        val = t * float(self.c @ y)
        for b in self.blocks:
            L = _chol(b.F(y))
            if L is None:
                return np.inf
            val -= 2.0 * np.log(np.diag(L)).sum()
        return val

    def newton(self, y, t):
        g = t * self.c.copy()
        rows = []
        for b in self.blocks:
            L = _chol(b.F(y))
            # B_i = L^-1 F_i L^-T, so H_ij = <B_i, B_j> and g_i -= tr B_i
            T1 = np.linalg.solve(L, b.A)
            B = np.linalg.solve(L, np.transpose(T1, (0, 2, 1)))
            g[b.vars] -= np.einsum("kii->k", B)
            J = np.zeros((b.s * b.s, self.m))
            J[:, b.vars] = B.reshape(len(b.vars), -1).T
            rows.append(J)
        J = np.vstack(rows)
        scale = np.linalg.norm(J, axis=0)
        scale[scale == 0] = 1.0
        R = np.linalg.qr(J / scale, mode="r")
        if not np.all(np.isfinite(R)) or np.min(np.abs(np.diag(R))) < 1e-15 * np.abs(R).max():
            raise LinAlgError("singular Newton system")
        w = solve_triangular(R, g / scale, trans="T")
        dy = -solve_triangular(R, w) / scale
        return dy, float(-(g @ dy))

    def centre(self, y, t, budget, tol=1e-9, stop=None):
        """Damped Newton to the central point; returns ``(y, steps, centred)``.

        ``stop(y)`` ends the walk early once it holds.
        """
        f = self.value(y, t)
        for k in range(budget):
            if stop is not None and stop(y):
                return y, k, False
            dy, lam2 = self.newton(y, t)
            if lam2 / 2 <= tol:
                return y, k, True
            a = 1.0 if lam2 < 0.25 else 1.0 / (1.0 + np.sqrt(lam2))
            while a > 1e-14:
                fn = self.value(y + a * dy, t)
                if fn <= f - 0.1 * a * lam2:
                    break
                a *= 0.5
            else:
                # no more progress in floating point; close enough if the decrement is small
                return y, k, lam2 < 1e-2
            y, f = y + a * dy, fn
        return y, budget, False

    def dual(self, y, t):
        S = [b.F(y) for b in self.blocks]
        X = [np.linalg.inv(Sb) / t for Sb in S]
        r = self.c.copy()
        for b, Xb in zip(self.blocks, X):
            r[b.vars] -= np.einsum("kij,ij->k", b.A, Xb)
        return X, S, float(np.linalg.norm(r) / (1.0 + np.linalg.norm(self.c)))


def _strictly_feasible(blocks, y) -> bool:
    return all(_chol(b.F(y)) is not None for b in blocks)


def solve_sdp(sdp: SdpProblem, tol: float = 1e-7, max_iter: int = 1000, init=None,
              t0: float = 1.0, growth: float = 10.0) -> SdpSolution:
    """Solve the moment SDP until the barrier gap ``N / t`` is below ``tol``.

    ``init`` is an optional full moment vector.  When it is strictly
    feasible phase I is skipped and the path starts there at ``t0``.
    """
    m = sdp.n_moments
    c = np.asarray(sdp.c[1:], dtype=float)
    c0 = float(sdp.c[0])
    blocks = [_Block(b, m) for b in sdp.blocks]
    y = np.zeros(m) if init is None else np.array(init[1:], dtype=float)
    steps = 0
    t = 1.0
    status = "iteration limit"
    phase_one = not _strictly_feasible(blocks, y)

    try:
        if phase_one:
            slack = [b.with_slack(m) for b in blocks]
            s0 = max(-np.linalg.eigvalsh(b.F(y))[0] for b in blocks) + 1.0
            aux = _Barrier(slack, np.r_[np.zeros(m), 1.0])
            z = np.r_[y, s0]
            while True:
                # leave as soon as the slack is negative: the phase-I set is often unbounded
                z, k, _ = aux.centre(z, t, min(CENTRE_STEPS, max_iter - steps),
                                     stop=lambda z: z[m] < 0)
                steps += k
                if z[m] < 0:
                    break
                if aux.N / t < 1e-13:
                    return _finish(sdp, blocks, c, c0, y, 1.0, "infeasible", steps, phase_one)
                if steps >= max_iter:
                    return _finish(sdp, blocks, c, c0, y, 1.0, status, steps, phase_one)
                t *= growth
            y = z[:m]

        main = _Barrier(blocks, c)
        t = t0
        prev, runaway = None, 0
        while True:
            y, k, _ = main.centre(y, t, min(CENTRE_STEPS, max_iter - steps))
            steps += k
            obj = float(c @ y)
            # near the central path c^T y - p* <= N / t, so a drop far beyond the
            # previous gap means there is no finite optimum
            runaway = runaway + 1 if prev is not None and prev - obj > 10 * main.N / (t / growth) else 0
            prev = obj
            if np.abs(y).max() > 1e10 or runaway >= 3:
                status = "unbounded"
                break
            if runaway == 0 and main.N / t <= tol * max(1.0, abs(obj + c0)):
                status = "optimal"
                break
            if steps >= max_iter:
                break
            t *= growth
    except LinAlgError:
        status = "failed"
    return _finish(sdp, blocks, c, c0, y, t, status, steps, phase_one)


def _finish(sdp, blocks, c, c0, y, t, status, steps, phase_one):
    main = _Barrier(blocks, c)
    bound = float(c @ y) + c0
    gap = main.N / t
    if _strictly_feasible(blocks, y):
        X, S, p_inf = main.dual(y, t)
    else:
        X, S, p_inf = [], [b.F(y) for b in blocks], np.inf
    sol = SdpSolution(np.r_[1.0, y], bound, bound - gap, status, steps, float(gap), p_inf, 0.0,
                      X, S, phase_one)
    return sol.with_basis(sdp.basis)
