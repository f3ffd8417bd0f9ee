"""Sparse real polynomials, monomial bases and moment/localizing matrices.

A polynomial is a dict mapping exponent tuples to coefficients.  Moment
vectors are dicts mapping exponent tuples to pseudo-moment values.
"""

from __future__ import annotations

from collections.abc import Mapping
from math import comb

import numpy as np

__all__ = [
    "MAX_BASIS",
    "MonomialBasis",
    "build_basis",
    "poly_add",
    "poly_mul",
    "poly_scale",
    "poly_degree",
    "poly_eval",
    "poly_quadratic",
    "monomial",
    "moment_matrix",
    "localizing_matrix",
    "point_moments",
    "mixture_moments",
]

MAX_BASIS = 100_000


class MonomialBasis:
    """Exponent tuples of total degree ``<= order`` in graded-lex order."""

    def __init__(self, n_vars: int, order: int, monomials):
        self.n_vars = n_vars
        self.order = order
        self.monomials = list(monomials)
        self.index = {a: i for i, a in enumerate(self.monomials)}

    def __len__(self):
        return len(self.monomials)

    def __iter__(self):
        return iter(self.monomials)

    def __getitem__(self, i):
        return self.monomials[i]

    def __eq__(self, other):
        return isinstance(other, MonomialBasis) and self.monomials == other.monomials

    def __repr__(self):
        return f"MonomialBasis(n_vars={self.n_vars}, order={self.order}, size={len(self)})"


def _compositions(total, parts):
    """Exponent tuples with the given total, first variable's power descending."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def build_basis(n_vars: int, order: int) -> MonomialBasis:
    if n_vars < 1 or order < 0:
        raise ValueError("need n_vars >= 1 and order >= 0")
    size = comb(n_vars + order, order)
    if size > MAX_BASIS:
        raise ValueError(f"basis of {size} monomials exceeds the limit of {MAX_BASIS}")
    monos = [m for deg in range(order + 1) for m in _compositions(deg, n_vars)]
    return MonomialBasis(n_vars, order, monos)


# ---------------------------------------------------------------------------
# polynomials


def monomial(n_vars, **powers):
    """``monomial(3, x0=1, x2=2)`` is x0 * x2^2 as an exponent tuple."""
    exp = [0] * n_vars
    for name, p in powers.items():
        exp[int(name[1:])] = p
    return tuple(exp)


def _add_exp(a, b):
    return tuple(i + j for i, j in zip(a, b))


def poly_add(*polys) -> dict:
    out = {}
    for p in polys:
        for a, c in p.items():
            out[a] = out.get(a, 0.0) + c
    return {a: c for a, c in out.items() if c != 0}


def poly_scale(p, s) -> dict:
    return {a: s * c for a, c in p.items() if s * c != 0}


def poly_mul(p, q) -> dict:
    out = {}
    for a, c in p.items():
        for b, d in q.items():
            e = _add_exp(a, b)
            out[e] = out.get(e, 0.0) + c * d
    return {a: c for a, c in out.items() if c != 0}


def poly_degree(p) -> int:
    return max((sum(a) for a in p), default=0)


def poly_eval(p, x) -> float:
    x = np.asarray(x, dtype=float)
    return float(sum(c * np.prod(x ** np.array(a)) for a, c in p.items()))


def poly_quadratic(n_vars, Q=None, b=None, c=0.0, idx=None) -> dict:
    """Polynomial ``x_I^T Q x_I + b^T x_I + c`` over the variables ``I=idx``."""
    size = len(Q) if Q is not None else len(b) if b is not None else 0
    idx = list(range(size)) if idx is None else list(idx)
    out = {}

    def put(exp, val):
        if val != 0:
            out[exp] = out.get(exp, 0.0) + val

    zero = [0] * n_vars
    if c:
        put(tuple(zero), float(c))
    if b is not None:
        for k, val in enumerate(b):
            e = list(zero)
            e[idx[k]] += 1
            put(tuple(e), float(val))
    if Q is not None:
        Q = np.asarray(Q, dtype=float)
        for i in range(len(idx)):
            for j in range(len(idx)):
                if Q[i, j]:
                    e = list(zero)
                    e[idx[i]] += 1
                    e[idx[j]] += 1
                    put(tuple(e), float(Q[i, j]))
    return {a: v for a, v in out.items() if v != 0}


# ---------------------------------------------------------------------------
# moment and localizing matrices


def _lookup(y, exp):
    try:
        return y[exp]
    except KeyError:
        raise KeyError(f"moment {exp} missing") from None


def moment_matrix(basis: MonomialBasis, y: Mapping) -> np.ndarray:
    """``M[a, b] = y[a + b]`` over ``basis``."""
    s = len(basis)
    M = np.empty((s, s))
    for i, a in enumerate(basis):
        for j in range(i, s):
            M[i, j] = M[j, i] = _lookup(y, _add_exp(a, basis[j]))
    return M


def localizing_matrix(g: Mapping, basis: MonomialBasis, d: int, y: Mapping) -> np.ndarray:
    """``L[a, b] = sum_c g_c y[c + a + b]`` over monomials of degree at most
    ``d - ceil(deg g / 2)``."""
    dg = (poly_degree(g) + 1) // 2
    if dg > d:
        raise ValueError(f"constraint degree {poly_degree(g)} exceeds relaxation order {d}")
    sub = build_basis(basis.n_vars, d - dg)
    s = len(sub)
    L = np.zeros((s, s))
    for i, a in enumerate(sub):
        for j in range(i, s):
            ab = _add_exp(a, sub[j])
            val = sum(c * _lookup(y, _add_exp(e, ab)) for e, c in g.items())
            L[i, j] = L[j, i] = val
    return L


def point_moments(x, order: int) -> dict:
    """Moments ``y[a] = x^a`` of the Dirac measure at ``x`` up to ``order``."""
    x = np.asarray(x, dtype=float)
    return {a: float(np.prod(x ** np.array(a))) for a in build_basis(len(x), order)}


def mixture_moments(points, weights, order: int) -> dict:
    """Moments of a finite mixture of Dirac measures."""
    weights = np.asarray(weights, dtype=float)
    ys = [point_moments(p, order) for p in points]
    return {a: float(sum(w * y[a] for w, y in zip(weights, ys))) for a in ys[0]}
