"""Moment relaxation of a polynomial optimisation problem.

The relaxation of order ``d`` works on pseudo-moments ``y_a`` for every
monomial of degree ``<= 2d``, with ``y_0 = 1``.  It requires the order-``d``
moment matrix and one localizing matrix per inequality to be positive
semidefinite.  Equalities ``g = 0`` are replaced by the band
``-delta <= g <= delta`` (two localizing blocks), because exact equalities
leave the relaxation without interior points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .moments import MonomialBasis, build_basis, poly_degree
from .pop import PopProblem

__all__ = ["SdpBlock", "SdpProblem", "build_moment_sdp", "extract_candidate", "MAX_MOMENTS"]

# the interior-point solver works with dense Schur complements
MAX_MOMENTS = 2000


def _add(a, b):
    return tuple(i + j for i, j in zip(a, b))


@dataclass
class SdpBlock:
    """Block ``F(y) = sum_a y_a F_a`` stored as upper-triangle triplets.

    ``var[k]`` indexes the moment basis (0 is the constant ``y_0``).
    """

    size: int
    var: np.ndarray
    row: np.ndarray
    col: np.ndarray
    val: np.ndarray
    name: str = ""

    def matrix(self, y) -> np.ndarray:
        """Evaluate the block at the full moment vector ``y`` (``y[0] = 1``)."""
        F = np.zeros((self.size, self.size))
        np.add.at(F, (self.row, self.col), self.val * np.asarray(y)[self.var])
        return F + np.triu(F, 1).T


@dataclass
class SdpProblem:
    """``min c^T y`` over moment vectors with ``y_0 = 1`` and every block PSD."""

    basis: MonomialBasis  # moment variables, degree <= 2d
    blocks: list
    c: np.ndarray  # objective over the full moment vector (c[0] is constant)
    order: int
    delta: float
    n_vars: int
    pop: PopProblem | None = field(default=None, repr=False)

    @property
    def n_moments(self) -> int:
        """Number of free moment variables (excluding ``y_0``)."""
        return len(self.basis) - 1

    def objective(self, y) -> float:
        return float(self.c @ y)

    def min_eigenvalues(self, y) -> list[float]:
        return [float(np.linalg.eigvalsh(b.matrix(y))[0]) for b in self.blocks]

    def moments_vector(self, moments: dict) -> np.ndarray:
        return np.array([moments[a] for a in self.basis])

    def moments_dict(self, y) -> dict:
        return {a: float(v) for a, v in zip(self.basis, y)}


def _block(poly, sub: MonomialBasis, index, name) -> SdpBlock:
    var, row, col, val = [], [], [], []
    for i, a in enumerate(sub):
        for j in range(i, len(sub)):
            ab = _add(a, sub[j])
            for e, c in poly.items():
                var.append(index[_add(e, ab)])
                row.append(i)
                col.append(j)
                val.append(c)
    return SdpBlock(len(sub), np.array(var, dtype=int), np.array(row, dtype=int),
                    np.array(col, dtype=int), np.array(val, dtype=float), name)


def build_moment_sdp(pop: PopProblem, d: int, delta: float = 1e-6) -> SdpProblem:
    """Order-``d`` moment relaxation of ``pop`` with equality band ``delta``."""
    has_eq = any(c.sense == "==" for c in pop.constraints)
    if has_eq and not delta > 0:
        raise ValueError("delta must be positive when equalities are present: with exact "
                         "equalities the relaxation has no strictly feasible point, so "
                         "Slater's condition fails")
    if 2 * d < pop.degree:
        raise ValueError(f"order {d} is too low for polynomials of degree {pop.degree}")
    full = build_basis(pop.n_vars, 2 * d)
    if len(full) - 1 > MAX_MOMENTS:
        raise ValueError(f"{len(full) - 1} moment variables exceed the desk-scale limit {MAX_MOMENTS}")
    index = full.index
    zero = full[0]
    blocks = [_block({zero: 1.0}, build_basis(pop.n_vars, d), index, "moment")]
    for k, con in enumerate(pop.constraints):
        dg = (poly_degree(con.poly) + 1) // 2
        sub = build_basis(pop.n_vars, d - dg)
        name = con.name or f"g{k}"
        if con.sense == ">=":
            blocks.append(_block(con.poly, sub, index, name))
        else:
            upper = {a: -c for a, c in con.poly.items()}
            upper[zero] = upper.get(zero, 0.0) + delta
            lower = dict(con.poly)
            lower[zero] = lower.get(zero, 0.0) + delta
            blocks.append(_block(upper, sub, index, name + "<=delta"))
            blocks.append(_block(lower, sub, index, name + ">=-delta"))
    c = np.zeros(len(full))
    for a, coef in pop.objective.items():
        c[index[a]] += coef
    return SdpProblem(full, blocks, c, d, delta, pop.n_vars, pop)


def extract_candidate(y, basis: MonomialBasis, pop: PopProblem | None = None, ratio=1e-6):
    """Point encoded by a rank-one order-1 moment matrix, else ``None``.

    ``y`` is a moment dict or a vector over ``basis``.  With a network POP
    the point is returned as complex voltages.
    """
    if not isinstance(y, dict):
        y = {a: float(v) for a, v in zip(basis, y)}
    n = basis.n_vars
    first = build_basis(n, 1)
    M = np.empty((n + 1, n + 1))
    for i, a in enumerate(first):
        for j, b in enumerate(first):
            M[i, j] = y[_add(a, b)]
    w, V = np.linalg.eigh(M)
    if w[-1] <= 0 or w[-2] / w[-1] > ratio:
        return None
    top = V[:, -1] * np.sqrt(w[-1])
    if abs(top[0]) < 1e-12:
        return None
    x = top[1:] / top[0]
    if pop is not None and pop.n_bus is not None:
        return pop.state(x)
    return x
