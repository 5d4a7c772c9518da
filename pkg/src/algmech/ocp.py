"""Optimal control of mechanical systems as second-order variational problems.

The controlled equations d/dt dL/dy^A + C^C_AB y^B dL/dy^C - rho^i_A dL/dx^i = u_A
are expanded along admissible curves into F_A(x, y, z).  Actuated components
define the controls, unactuated ones become second-order constraints.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .algebroid import AlgebroidChart
from .calculus import ExprField, Var, diff, mul, neg, substitute, total
from .errors import RegularityError
from .sorusk import PontryaginState, SecondOrderProblem, eliminate, optimality_field


@dataclass(frozen=True)
class ControlProblem:
    """Cost over (x, y, u) with u_j the force on fiber direction actuation[j].

    Indices are 0-based.  Boundary data are optional and only consumed by
    the shooting layer.
    """

    chart: AlgebroidChart
    L: ExprField
    cost: ExprField
    actuation: tuple[int, ...]
    x0: np.ndarray | None = None
    y0: np.ndarray | None = None
    xT: np.ndarray | None = None
    yT: np.ndarray | None = None
    T: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        m, n = self.chart.base_dim, self.chart.fiber_rank
        act = tuple(int(a) for a in self.actuation)
        object.__setattr__(self, "actuation", act)
        if len(set(act)) != len(act) or not all(0 <= a < n for a in act):
            raise ValueError(f"actuation indices must be distinct and in 0..{n - 1}")
        if not act:
            raise ValueError("at least one actuated direction is required")
        if not isinstance(self.L, ExprField) or tuple(self.L.inputs) != (("x", m), ("y", n)):
            raise ValueError("L must be an expression field over (x, y)")
        if not isinstance(self.cost, ExprField) or tuple(self.cost.inputs) != (("x", m), ("y", n), ("u", len(act))):
            raise ValueError(f"cost must be an expression field over (x, y, u[{len(act)}])")
        if not self.chart.symbolic:
            raise ValueError("control problems need an expression-backed chart")
        if self.T <= 0:
            raise ValueError("horizon T must be positive")

    @property
    def unactuated(self) -> tuple[int, ...]:
        return tuple(a for a in range(self.chart.fiber_rank) if a not in self.actuation)

    @property
    def fully_actuated(self) -> bool:
        return len(self.actuation) == self.chart.fiber_rank


def control_problem(chart: AlgebroidChart, lagrangian: str, cost: str, actuation: Sequence[int] | None = None,
                    params=None, **boundary) -> ControlProblem:
    """Parse Lagrangian and cost strings; actuation defaults to all directions."""
    m, n = chart.base_dim, chart.fiber_rank
    act = tuple(range(n)) if actuation is None else tuple(actuation)
    L = ExprField.from_sources(lagrangian, (("x", m), ("y", n)), (), params)
    c = ExprField.from_sources(cost, (("x", m), ("y", n), ("u", len(act))), (), params)
    return ControlProblem(chart, L, c, act, **boundary)


def controlled_el_expressions(chart: AlgebroidChart, L: ExprField) -> list:
    """F_A(x, y, z) = L_yAyB z^B + L_yAxi rho^i_B y^B - rho^i_A L_xi + C^C_AB y^B L_yC."""
    m, n = chart.base_dim, chart.fiber_rank
    rho = chart.anchor_exprs().reshape(m, n)
    c = chart.structure_exprs().reshape(n, n, n)
    lag = L.exprs[0]
    xs = [f"x{i + 1}" for i in range(m)]
    ys = [f"y{a + 1}" for a in range(n)]
    y = [Var(v) for v in ys]
    z = [Var(f"z{a + 1}") for a in range(n)]
    ly = [diff(lag, v) for v in ys]
    lx = [diff(lag, v) for v in xs]
    xdot = [total(mul(rho[i, b], y[b]) for b in range(n)) for i in range(m)]
    out = []
    for a in range(n):
        terms = [mul(diff(ly[a], ys[b]), z[b]) for b in range(n)]
        terms += [mul(diff(ly[a], xs[i]), xdot[i]) for i in range(m)]
        terms += [neg(mul(rho[i, a], lx[i])) for i in range(m)]
        terms += [mul(mul(c[a, b, cc], y[b]), ly[cc]) for b in range(n) for cc in range(n)]
        out.append(total(terms))
    return out


def _second_order_field(chart: AlgebroidChart, e) -> ExprField:
    n = chart.fiber_rank
    return ExprField((), (("x", chart.base_dim), ("y", n), ("z", n)), (e,))


def _substituted_cost(cp: ControlProblem, forces) -> object:
    mapping = {f"u{j + 1}": forces[a] for j, a in enumerate(cp.actuation)}
    return substitute(cp.cost.exprs[0], mapping)


def build_fully_actuated(cp: ControlProblem) -> SecondOrderProblem:
    """Unconstrained problem with L~(x, y, z) = cost(x, y, F(x, y, z))."""
    if not cp.fully_actuated:
        raise ValueError(f"{len(cp.actuation)} of {cp.chart.fiber_rank} directions actuated; use build_underactuated")
    forces = controlled_el_expressions(cp.chart, cp.L)
    return SecondOrderProblem(cp.chart, _second_order_field(cp.chart, _substituted_cost(cp, forces)))


@dataclass(frozen=True)
class ReducedUnderactuatedProblem:
    """Underactuated problem with z^alpha = G^alpha(x, y, z^a) installed.

    ``G`` and ``L_M`` are fields over (x, y, z[k]) where z_j is the j-th
    actuated acceleration.  ``W`` is d2L/dy^alpha dy^beta over (x, y).
    """

    control: ControlProblem
    problem: SecondOrderProblem
    G: ExprField
    L_M: ExprField
    W: ExprField

    @property
    def actuation(self) -> tuple[int, ...]:
        return self.control.actuation

    @property
    def unactuated(self) -> tuple[int, ...]:
        return self.control.unactuated


def build_underactuated(cp: ControlProblem) -> tuple[SecondOrderProblem, ReducedUnderactuatedProblem]:
    """Constrained problem with Phi^alpha = F_alpha and its eliminated reduction."""
    if cp.fully_actuated:
        raise ValueError("all directions are actuated; use build_fully_actuated")
    chart = cp.chart
    m, n = chart.base_dim, chart.fiber_rank
    act, una = cp.actuation, cp.unactuated
    forces = controlled_el_expressions(chart, cp.L)
    lt = _second_order_field(chart, _substituted_cost(cp, forces))
    phis = tuple(_second_order_field(chart, forces[al]) for al in una)
    constrained = SecondOrderProblem(chart, lt, phis, "constrained_multipliers")
    ly = [diff(cp.L.exprs[0], f"y{a + 1}") for a in range(n)]
    W = ExprField((len(una), len(una)), (("x", m), ("y", n)),
                  tuple(diff(ly[al], f"y{be + 1}") for al in una for be in una))
    for label, x, y in (("initial", cp.x0, cp.y0), ("final", cp.xT, cp.yT)):
        if x is None or y is None:
            continue
        w = np.atleast_2d(W(np.asarray(x, dtype=float), np.asarray(y, dtype=float)))
        sv = np.linalg.svd(w, compute_uv=False)
        if sv[-1] <= 1e-12 * max(1.0, sv[0]):
            raise RegularityError(f"W is singular at the {label} state x={list(x)}, y={list(y)}", w, label)
    try:
        reduced = eliminate(constrained, una)
    except ZeroDivisionError as err:
        raise RegularityError("W is singular", np.zeros((len(una), len(una)))) from err
    except np.linalg.LinAlgError as err:
        raise RegularityError(f"W is singular: {err}", np.zeros((len(una), len(una)))) from err
    G = reduced.elimination.psi
    zmap = {f"z{a + 1}": Var(f"_a{j + 1}") for j, a in enumerate(act)}
    zmap.update({f"z{a + 1}": Var(f"_g{al + 1}") for al, a in enumerate(una)})
    lm = substitute(lt.exprs[0], zmap)
    lm = substitute(lm, {**{f"_a{j + 1}": Var(f"z{j + 1}") for j in range(len(act))},
                         **{f"_g{al + 1}": G.exprs[al] for al in range(len(una))}})
    L_M = ExprField((), (("x", m), ("y", n), ("z", len(act))), (lm,))
    return constrained, ReducedUnderactuatedProblem(cp, reduced, G, L_M, W)


def underactuated_optimality_field(red: ReducedUnderactuatedProblem, s: PontryaginState) -> PontryaginState:
    """Time derivative of (x, y, z^a, p, pbar); ``s.z`` holds the actuated z^a."""
    return optimality_field(red.problem, s)


def force_field(cp: ControlProblem) -> ExprField:
    """All n components F_A(x, y, z) as one vector field."""
    got = cp._cache.get("F")
    if got is None:
        n = cp.chart.fiber_rank
        exprs = controlled_el_expressions(cp.chart, cp.L)
        got = cp._cache["F"] = ExprField((n,), (("x", cp.chart.base_dim), ("y", n), ("z", n)), tuple(exprs))
    return got


def reconstruct_controls(cp: ControlProblem, x, y, z) -> np.ndarray:
    """u_a = F_a(x, y, z) for the actuated directions (z of full length n)."""
    return np.asarray(force_field(cp)(x, y, z), dtype=float)[list(cp.actuation)]


def constraint_values(red: ReducedUnderactuatedProblem, x, y, z_full) -> np.ndarray:
    """Phi^alpha = F_alpha along a full (x, y, z); zero on admissible trajectories."""
    return np.asarray(force_field(red.control)(x, y, z_full), dtype=float)[list(red.unactuated)]


def full_acceleration(red: ReducedUnderactuatedProblem, x, y, z_act) -> np.ndarray:
    """Assemble z in R^n from actuated z^a and G."""
    n = red.control.chart.fiber_rank
    z = np.zeros(n)
    z[list(red.actuation)] = z_act
    z[list(red.unactuated)] = np.atleast_1d(red.G(x, y, z_act))
    return z
