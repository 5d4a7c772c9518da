"""First-order Lagrangian and Hamiltonian mechanics on an algebroid chart."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .algebroid import AlgebroidChart, AlgebroidState, SecondOrderState
from .calculus import ExprField, SmoothField
from .errors import RegularityError


def lagrangian_field(chart: AlgebroidChart, source, params: Mapping[str, float] | None = None) -> ExprField:
    """Scalar expression field over (x, y)."""
    return ExprField.from_sources(source, (("x", chart.base_dim), ("y", chart.fiber_rank)), (), params)


def hamiltonian_field(chart: AlgebroidChart, source, params: Mapping[str, float] | None = None) -> ExprField:
    """Scalar expression field over (x, p)."""
    return ExprField.from_sources(source, (("x", chart.base_dim), ("p", chart.fiber_rank)), (), params)


@dataclass(frozen=True)
class LagrangianProblem:
    chart: AlgebroidChart
    L: SmoothField

    def __post_init__(self):
        want = (("x", self.chart.base_dim), ("y", self.chart.fiber_rank))
        if tuple(self.L.inputs) != want or tuple(self.L.shape) != ():
            raise ValueError(f"L must be a scalar field over {want}")


@dataclass(frozen=True)
class HamiltonianProblem:
    chart: AlgebroidChart
    H: SmoothField

    def __post_init__(self):
        want = (("x", self.chart.base_dim), ("p", self.chart.fiber_rank))
        if tuple(self.H.inputs) != want or tuple(self.H.shape) != ():
            raise ValueError(f"H must be a scalar field over {want}")


@dataclass(frozen=True)
class ForceSection:
    """Force components (u_F)_A as a field over (x, y, t)."""

    u: SmoothField

    def __call__(self, x, y, t: float) -> np.ndarray:
        return np.asarray(self.u(x, y, [t]), dtype=float).ravel()

    @classmethod
    def from_sources(cls, chart: AlgebroidChart, sources, params=None) -> "ForceSection":
        n = chart.fiber_rank
        return cls(
            ExprField.from_sources(list(sources), (("x", chart.base_dim), ("y", n), ("t", 1)), (n,), params)
        )

    @classmethod
    def constant(cls, chart: AlgebroidChart, values) -> "ForceSection":
        return cls.from_sources(chart, [float(v) for v in np.ravel(values)])

    @classmethod
    def zero(cls, chart: AlgebroidChart) -> "ForceSection":
        return cls.constant(chart, np.zeros(chart.fiber_rank))


def _parts(prob: LagrangianProblem, x, y):
    jet = prob.L.jet(x, y, order=2)
    rho = prob.chart.anchor_at(x)
    c = prob.chart.structure_at(x)
    return jet, rho, c


def _el_terms(prob: LagrangianProblem, x, y):
    """(W, b) with el_residual = W z + b."""
    jet, rho, c = _parts(prob, x, y)
    lx, ly = jet.d("x"), jet.d("y")
    w = jet.dd("y", "y")
    b = jet.dd("y", "x") @ (rho @ y) + np.einsum("abc,b,c->a", c, y, ly) - rho.T @ lx
    return w, b


def el_residual(prob: LagrangianProblem, state: SecondOrderState) -> np.ndarray:
    """d/dt(dL/dy^A) + C^C_AB y^B dL/dy^C - rho^i_A dL/dx^i along (x, y, z)."""
    w, b = _el_terms(prob, state.x, state.y)
    return w @ state.z + b


def controlled_el_residual(prob: LagrangianProblem, state: SecondOrderState, force: ForceSection, t: float) -> np.ndarray:
    return el_residual(prob, state) - force(state.x, state.y, t)


def energy(prob: LagrangianProblem, state: AlgebroidState) -> float:
    jet = prob.L.jet(state.x, state.y, order=1)
    return float(jet.d("y") @ state.y - jet.value)


def legendre(prob: LagrangianProblem, state: AlgebroidState) -> np.ndarray:
    """Fiber derivative p_A = dL/dy^A (diagnostic only)."""
    return prob.L.jet(state.x, state.y, order=1).d("y").copy()


def hamilton_field(prob: HamiltonianProblem, x, p) -> tuple[np.ndarray, np.ndarray]:
    """xdot = rho dH/dp,  pdot_A = -rho^i_A dH/dx^i - p_C C^C_AB dH/dp_B."""
    jet = prob.H.jet(x, p, order=1)
    rho = prob.chart.anchor_at(x)
    c = prob.chart.structure_at(x)
    hx, hp = jet.d("x"), jet.d("p")
    p = np.atleast_1d(np.asarray(p, dtype=float))
    xdot = rho @ hp
    pdot = -rho.T @ hx - np.einsum("c,abc,b->a", p, c, hp)
    return xdot, pdot


def el_vector_field(prob: LagrangianProblem, force: ForceSection | None = None, rcond: float = 1e-12) -> Callable:
    """Explicit first-order field on (x, y) for a regular Lagrangian."""
    m = prob.chart.base_dim

    def f(t, s):
        x, y = s[:m], s[m:]
        w, b = _el_terms(prob, x, y)
        rhs = -b if force is None else force(x, y, t) - b
        _check_regular(w, rcond, "d2L/dy dy")
        return np.concatenate([prob.chart.anchor_at(x) @ y, np.linalg.solve(w, rhs)])

    return f


def hamilton_vector_field(prob: HamiltonianProblem) -> Callable:
    m = prob.chart.base_dim

    def f(t, s):
        xdot, pdot = hamilton_field(prob, s[:m], s[m:])
        return np.concatenate([xdot, pdot])

    return f


def _check_regular(w: np.ndarray, rcond: float, label: str):
    if w.size == 0:
        return
    sv = np.linalg.svd(w, compute_uv=False)
    if sv[-1] <= rcond * max(sv[0], 1.0):
        raise RegularityError(f"{label} is singular (smallest singular value {sv[-1]:.3e})", w)
