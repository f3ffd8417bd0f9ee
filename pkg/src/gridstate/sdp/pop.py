"""Polynomial optimisation form of the estimation problem.

Variables are the state coordinates of :func:`gridstate.estimation.to_coords`
followed by auxiliaries tied to quadratic measurement functions by
equalities ``h(x) - w = 0``.  PMU entries contribute ``a_j |A_j x - z_j|^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..estimation import EstimationProblem, from_coords, to_coords
from ..measurements import PMU_KINDS, build_measurement_matrices
from .moments import poly_add, poly_degree, poly_eval, poly_mul, poly_quadratic, poly_scale

__all__ = ["PopProblem", "Constraint", "estimation_pop", "coordinate_map"]


@dataclass(frozen=True)
class Constraint:
    poly: dict
    sense: str  # ">=" for g >= 0, "==" for g == 0
    name: str = ""

    def __post_init__(self):
        if self.sense not in (">=", "=="):
            raise ValueError("constraint sense must be '>=' or '=='")


@dataclass
class PopProblem:
    """``min f(x)`` subject to polynomial constraints ``g_i(x) >= 0`` or ``== 0``."""

    n_vars: int
    objective: dict
    constraints: list = field(default_factory=list)
    names: list = field(default_factory=list)
    # layout of the voltage coordinates, when the problem comes from a network
    n_bus: int | None = None
    reference: int | None = None
    lift: object = None
    source: EstimationProblem | None = None

    def __post_init__(self):
        for a, c in self.objective.items():
            if len(a) != self.n_vars or not np.isfinite(c):
                raise ValueError(f"bad objective term {a}: {c}")
        for con in self.constraints:
            for a, c in con.poly.items():
                if len(a) != self.n_vars or not np.isfinite(c):
                    raise ValueError(f"bad constraint term {a}: {c}")

    @property
    def degree(self) -> int:
        return max([poly_degree(self.objective)] + [poly_degree(c.poly) for c in self.constraints])

    def value(self, x) -> float:
        return poly_eval(self.objective, x)

    def violation(self, x) -> float:
        worst = 0.0
        for con in self.constraints:
            g = poly_eval(con.poly, x)
            worst = max(worst, abs(g) if con.sense == "==" else max(-g, 0.0))
        return worst

    def state(self, x) -> np.ndarray:
        """Complex voltages from the leading coordinates of ``x``."""
        if self.n_bus is None:
            raise ValueError("problem carries no voltage layout")
        return from_coords(np.asarray(x)[: 2 * self.n_bus - 1], self.n_bus, self.reference)

    def point(self, v) -> np.ndarray:
        """Feasible point for state ``v`` (auxiliaries set consistently)."""
        if self.lift is None:
            raise ValueError("problem carries no lifting map")
        return self.lift(v)


def coordinate_map(n: int, ref: int) -> np.ndarray:
    """Complex ``n x (2n-1)`` matrix ``T`` with ``v = T x``."""
    T = np.zeros((n, 2 * n - 1), dtype=complex)
    others = [k for k in range(n) if k != ref]
    for c, k in enumerate(others):
        T[k, c] = 1.0
        T[k, n - 1 + c] = 1j
    T[ref, 2 * n - 2] = 1.0
    return T


def estimation_pop(prob: EstimationProblem, gauge=True, form="w", vmax=1.5) -> PopProblem:
    """Write the selected estimation objective as a POP.

    ``form="w"`` adds one variable ``w_k = |v_k|^2`` per bus carrying a
    voltage-magnitude entry; the other SCADA terms stay quartic in ``x``.
    ``form="u"`` adds one auxiliary ``u_j = h_j(x)`` per SCADA entry, so the
    objective becomes quadratic at the price of one equality per entry.
    With ``voltage_term="abs"`` each voltage-magnitude entry gets an
    epigraph variable ``t_j >= |w - z_j^2|``.  ``gauge`` adds ``Re v_ref >= 0``.

    ``vmax`` adds the box ``x_i^2 <= vmax^2`` on every voltage coordinate and
    the implied bounds on the auxiliaries.  The boxes are redundant for any
    plausible state but keep the moment relaxation bounded, without which
    the SDP has no central path.  ``vmax=None`` leaves them out.
    """
    if form not in ("w", "u", "x"):
        raise ValueError("form must be 'w', 'u' or 'x'")
    net = prob.net
    n, ref = net.n, net.reference
    dim = 2 * n - 1
    T = coordinate_map(n, ref)
    mats = build_measurement_matrices(net)
    model = prob.model
    rows = {"pmu_v": np.eye(n), "pmu_i": model.Y, "pmu_if": model.Yf, "pmu_it": model.Yt}

    active = [j for j in range(len(prob.ms)) if prob.selection[j] > 0]
    scada = [j for j in active if not prob.is_pmu[j]]
    if form == "u":
        lifted = scada
        aux_of = {j: dim + i for i, j in enumerate(scada)}
        aux_names = [f"u{j}_{prob.kinds[j]}{prob.targets[j]}" for j in scada]
    elif form == "x":
        lifted, aux_of, aux_names = [], {}, []
    else:
        buses = sorted({int(prob.targets[j]) for j in scada if prob.kinds[j] == "vm"})
        lifted = [j for j in scada if prob.kinds[j] == "vm"]
        slot = {k: dim + i for i, k in enumerate(buses)}
        aux_of = {j: slot[int(prob.targets[j])] for j in lifted}
        aux_names = [f"w{k}" for k in buses]
    absv = [j for j in scada if prob.voltage_term == "abs" and prob.kinds[j] == "vm"]
    n_aux = len(aux_names)
    n_vars = dim + n_aux + len(absv)
    t_of = {j: dim + n_aux + i for i, j in enumerate(absv)}
    names = ([f"re_v{k}" for k in range(n) if k != ref] + [f"im_v{k}" for k in range(n) if k != ref]
             + [f"re_v{ref}"] + aux_names + [f"t{j}" for j in absv])

    def quadratic_form(kind, target):
        Q = np.real(T.conj().T @ mats.for_kind(kind)[target] @ T)
        return 0.5 * (Q + Q.T)

    objective = {}
    constraints = []
    tied = {}  # auxiliary variable -> quadratic form it stands for
    for j in active:
        a = prob.selection[j] * prob.coef[j]
        kind, target = prob.kinds[j], prob.targets[j]
        z = prob.values[j]
        if kind in PMU_KINDS:
            alpha = rows[kind][target] @ T
            Q = np.real(np.outer(alpha.conj(), alpha))
            b = -2.0 * np.real(np.conj(z) * alpha)
            objective = poly_add(objective, poly_quadratic(n_vars, a * Q, a * b, a * abs(z) ** 2,
                                                           idx=range(dim)))
            continue
        zz = z.real ** 2 if kind == "vm" else z.real
        if j not in aux_of:
            r = poly_quadratic(n_vars, quadratic_form(kind, target), c=-zz, idx=range(dim))
            objective = poly_add(objective, poly_scale(poly_mul(r, r), a))
            continue
        u = aux_of[j]
        if u not in tied:
            tied[u] = quadratic_form(kind, target)
            g = poly_add(poly_quadratic(n_vars, tied[u], idx=range(dim)),
                         poly_quadratic(n_vars, b=[-1.0], idx=[u]))
            constraints.append(Constraint(g, "==", f"h{j}"))
        if j in t_of:
            t = t_of[j]
            objective = poly_add(objective, poly_quadratic(n_vars, b=[a], idx=[t]))
            constraints.append(Constraint(poly_quadratic(n_vars, b=[1.0, -1.0], c=zz, idx=[t, u]), ">=",
                                          f"epi+{j}"))
            constraints.append(Constraint(poly_quadratic(n_vars, b=[1.0, 1.0], c=-zz, idx=[t, u]), ">=",
                                          f"epi-{j}"))
        else:
            objective = poly_add(objective, poly_quadratic(n_vars, [[a]], [-2.0 * a * zz], a * zz ** 2,
                                                           idx=[u]))
    if gauge:
        constraints.append(Constraint(poly_quadratic(n_vars, b=[1.0], idx=[dim - 1]), ">=", "gauge"))
    if vmax is not None:
        top = {u: np.abs(Q).sum() * vmax ** 2 for u, Q in tied.items()}
        for j, t in t_of.items():
            top[t] = top[aux_of[j]] + prob.values[j].real ** 2
        limits = [(i, vmax ** 2) for i in range(dim)] + [(i, top[i] ** 2) for i in sorted(top)]
        for i, lim in limits:
            constraints.append(Constraint(poly_quadratic(n_vars, [[-1.0]], c=lim, idx=[i]), ">=",
                                          f"box_{names[i]}"))

    def lift(v):
        x = np.zeros(n_vars)
        x[:dim] = to_coords(v, ref)
        for u, Q in tied.items():
            x[u] = x[:dim] @ Q @ x[:dim]
        for j in absv:
            x[t_of[j]] = abs(x[aux_of[j]] - prob.values[j].real ** 2)
        return x

    return PopProblem(n_vars, objective, constraints, names, n, ref, lift, prob)
