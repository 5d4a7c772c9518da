"""Second-order Skinner-Rusk construction in coordinates.

Every second-order mode is reduced to one scalar generating function

    Q(x, y, w, pbar) = L~(x, y, z(w)) - pbar . V(x, y, w)

where ``w`` collects the coordinates that Omega_0 does not see (z, the
free z^a after an elimination, or (z, lambda) for multipliers) and V is the
velocity of y.  The Pontryagin Hamiltonian is H = p . y - Q, the primary
constraint is dQ/dw = 0 and the dynamics are

    xdot = rho y,   ydot = -dQ/dpbar,   pdot_A = rho^i_A dQ/dx^i - C^C_AB p_C y^B,
    pbardot = -p + dQ/dy,   d/dt (dQ/dw) = 0  (solved for wdot with d2Q/dw dw).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .algebroid import AlgebroidChart
from .calculus import (
    CallableField,
    Expr,
    ExprField,
    Num,
    SmoothField,
    Var,
    add,
    diff,
    div,
    free_variables,
    mul,
    neg,
    sub,
    substitute,
    total,
)
from .errors import RegularityError

MODES = ("unconstrained", "constrained_multipliers", "vakonomic")
DEFAULT_TOL = 1e-9


def second_order_lagrangian(chart: AlgebroidChart, source, params=None) -> ExprField:
    """Scalar expression field over (x, y, z)."""
    n = chart.fiber_rank
    return ExprField.from_sources(source, (("x", chart.base_dim), ("y", n), ("z", n)), (), params)


@dataclass(frozen=True)
class Elimination:
    """Solved constraints: dependent coordinates as functions of the rest.

    Second-order modes: ``psi`` maps (x[m], y[n], z[k]) to z^alpha, where
    z_j is z^{free[j]}.  Vakonomic mode: ``psi`` maps (x[m], y[k]) to y^alpha.
    """

    dependent: tuple[int, ...]
    psi: SmoothField


@dataclass(frozen=True)
class SecondOrderProblem:
    chart: AlgebroidChart
    L: SmoothField
    constraints: tuple[SmoothField, ...] = ()
    mode: str = "unconstrained"
    elimination: Elimination | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        m, n = self.chart.base_dim, self.chart.fiber_rank
        want = (("x", m), ("y", n)) if self.mode == "vakonomic" else (("x", m), ("y", n), ("z", n))
        if tuple(self.L.inputs) != want or tuple(self.L.shape) != ():
            raise ValueError(f"L must be a scalar field over {want}")
        object.__setattr__(self, "constraints", tuple(self.constraints))
        for phi in self.constraints:
            if tuple(phi.inputs) != want or tuple(phi.shape) != ():
                raise ValueError(f"constraints must be scalar fields over {want}")
        if self.mode == "unconstrained" and (self.constraints or self.elimination):
            raise ValueError("unconstrained mode takes no constraints")
        if self.mode == "vakonomic" and self.elimination is None and self.constraints:
            raise ValueError("vakonomic mode needs an installed elimination")
        if self.elimination is not None:
            dep = tuple(int(a) for a in self.elimination.dependent)
            if len(set(dep)) != len(dep) or not all(0 <= a < n for a in dep):
                raise ValueError("elimination indices must be distinct and in range")
            k = n - len(dep)
            ewant = (("x", m), ("y", k)) if self.mode == "vakonomic" else (("x", m), ("y", n), ("z", k))
            if tuple(self.elimination.psi.inputs) != ewant or tuple(self.elimination.psi.shape) != (len(dep),):
                raise ValueError(f"elimination must map {ewant} to a vector of length {len(dep)}")

    @property
    def free(self) -> tuple[int, ...]:
        dep = set(self.elimination.dependent) if self.elimination else set()
        return tuple(a for a in range(self.chart.fiber_rank) if a not in dep)

    @property
    def dependent(self) -> tuple[int, ...]:
        return tuple(self.elimination.dependent) if self.elimination else ()

    @property
    def uses_multipliers(self) -> bool:
        return self.mode == "constrained_multipliers" and self.elimination is None

    @property
    def w_dim(self) -> int:
        n = self.chart.fiber_rank
        if self.mode == "vakonomic":
            return 0
        if self.elimination is not None:
            return len(self.free)
        return n + (len(self.constraints) if self.uses_multipliers else 0)

    @property
    def symbolic(self) -> bool:
        fields = [self.L, *self.constraints] + ([self.elimination.psi] if self.elimination else [])
        return self.chart.symbolic and all(isinstance(f, ExprField) for f in fields)


@dataclass(frozen=True)
class PontryaginState:
    """Point (x, y, z, p, pbar) of W_0; ``z`` holds the free z^a after an
    elimination and ``lam`` the multipliers in multiplier form."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    p: np.ndarray
    pbar: np.ndarray
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("x", "y", "z", "p", "pbar", "lam"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).ravel()
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
            object.__setattr__(self, name, arr)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.x, self.y, self.z, self.lam, self.p, self.pbar])

    @classmethod
    def from_flat(cls, prob: SecondOrderProblem, s) -> "PontryaginState":
        m, n = prob.chart.base_dim, prob.chart.fiber_rank
        k = len(prob.free) if prob.elimination is not None else n
        r = prob.w_dim - k
        s = np.asarray(s, dtype=float)
        cuts = np.cumsum([m, n, k, r, n])
        x, y, z, lam, p, pbar = np.split(s, cuts)
        return cls(x, y, z, p, pbar, lam)


# --------------------------------------------------------------------------
# generating function Q


def _rename(e: Expr, mapping: dict[str, Expr]) -> Expr:
    return substitute(e, mapping)


def _symbolic_q(prob: SecondOrderProblem) -> ExprField:
    m, n = prob.chart.base_dim, prob.chart.fiber_rank
    r = prob.w_dim
    L = prob.L.exprs[0]
    pb = [Var(f"pb{a + 1}") for a in range(n)]
    w = [Var(f"w{j + 1}") for j in range(r)]
    if prob.elimination is None:
        zmap = {f"z{a + 1}": w[a] for a in range(n)}
        q = _rename(L, zmap)
        if prob.uses_multipliers:
            for al, phi in enumerate(prob.constraints):
                q = add(q, mul(w[n + al], _rename(phi.exprs[0], zmap)))
        q = sub(q, total(mul(pb[a], w[a]) for a in range(n)))
    else:
        free, dep = prob.free, prob.dependent
        inner = {f"z{j + 1}": w[j] for j in range(len(free))}
        psi = [_rename(e, inner) for e in prob.elimination.psi.exprs]
        zmap = {f"z{a + 1}": w[j] for j, a in enumerate(free)}
        zmap.update({f"z{a + 1}": psi[al] for al, a in enumerate(dep)})
        q = _rename(L, zmap)
        q = sub(q, total(mul(pb[a], w[j]) for j, a in enumerate(free)))
        q = sub(q, total(mul(pb[a], psi[al]) for al, a in enumerate(dep)))
    return ExprField((), (("x", m), ("y", n), ("w", r), ("pb", n)), (q,))


def _opaque_q(prob: SecondOrderProblem) -> CallableField:
    m, n = prob.chart.base_dim, prob.chart.fiber_rank
    r = prob.w_dim

    def q(x, y, w, pb):
        if prob.elimination is None:
            z = w[:n]
            val = prob.L(x, y, z)
            if prob.uses_multipliers:
                val = val + sum(w[n + al] * phi(x, y, z) for al, phi in enumerate(prob.constraints))
            return val - pb @ z
        free, dep = list(prob.free), list(prob.dependent)
        psi = np.asarray(prob.elimination.psi(x, y, w), dtype=float)
        z = np.zeros(n)
        z[free], z[dep] = w, psi
        return prob.L(x, y, z) - pb[free] @ w - pb[dep] @ psi

    return CallableField((), (("x", m), ("y", n), ("w", r), ("pb", n)), q)


def generating_function(prob: SecondOrderProblem) -> SmoothField:
    """Q(x, y, w, pbar) with H = p.y - Q; cached on the problem."""
    if prob.mode == "vakonomic":
        raise ValueError("vakonomic problems use vakonomic_field")
    q = prob._cache.get("Q")
    if q is None:
        q = _symbolic_q(prob) if prob.symbolic else _opaque_q(prob)
        prob._cache["Q"] = q
    return q


def _w_of(prob: SecondOrderProblem, s: PontryaginState) -> np.ndarray:
    return np.concatenate([s.z, s.lam])


def _q_jet(prob: SecondOrderProblem, s: PontryaginState, order: int = 2):
    return generating_function(prob).jet(s.x, s.y, _w_of(prob, s), s.pbar, order=order)


# --------------------------------------------------------------------------
# Hamiltonian, presymplectic data


def pontryagin_hamiltonian(prob: SecondOrderProblem, s: PontryaginState) -> float:
    """H = pbar.V + p.y - L~ (V = z, or (z^a, Psi^alpha) after elimination)."""
    return float(s.p @ s.y - _q_jet(prob, s, 0).value)


def presymplectic_matrix(prob_or_rank, s: PontryaginState | None = None, kernel_dim: int | None = None) -> np.ndarray:
    """Matrix of Omega_0 in the basis (e11, e21, e12, e22, w).

    Entry [i, j] is Omega_0(b_i, b_j): the (1,1)x(1,1) block is
    C^C_AB p_C, the (1,1)/(1,2) and (2,1)/(2,2) pairings are identities and
    the w rows and columns vanish.
    """
    prob = prob_or_rank
    n = prob.chart.fiber_rank
    r = prob.w_dim if kernel_dim is None else kernel_dim
    c = prob.chart.structure_at(s.x)
    size = 4 * n + r
    om = np.zeros((size, size))
    om[:n, :n] = np.einsum("abc,c->ab", c, s.p)
    eye = np.eye(2 * n)
    om[: 2 * n, 2 * n : 4 * n] = eye
    om[2 * n : 4 * n, : 2 * n] = -eye
    return om


def _frame(prob: SecondOrderProblem, s: PontryaginState) -> np.ndarray:
    """State-space components (columns) of the basis (e11, e21, e12, e22, w).

    State order is (x, y, w, p, pbar)."""
    m, n, r = prob.chart.base_dim, prob.chart.fiber_rank, prob.w_dim
    rho = prob.chart.anchor_at(s.x)
    ns = m + n + r + 2 * n
    f = np.zeros((ns, 4 * n + r))
    f[:m, :n] = rho
    f[m : m + n, n : 2 * n] = np.eye(n)
    f[m + n + r : m + 2 * n + r, 2 * n : 3 * n] = np.eye(n)
    f[m + 2 * n + r :, 3 * n : 4 * n] = np.eye(n)
    f[m + n : m + n + r, 4 * n :] = np.eye(r)
    return f


def hamiltonian_differential(prob: SecondOrderProblem, s: PontryaginState) -> np.ndarray:
    """dH in the basis (e11, e21, e12, e22, w)."""
    j = _q_jet(prob, s, 1)
    rho = prob.chart.anchor_at(s.x)
    return np.concatenate([-rho.T @ j.d("x"), s.p - j.d("y"), s.y, -j.d("pb"), -j.d("w")])


def primary_constraints(prob: SecondOrderProblem, s: PontryaginState) -> tuple[np.ndarray, np.ndarray]:
    """phi = -dQ/dw (e.g. pbar_A - dL/dz^A) and their differentials in the basis."""
    j = _q_jet(prob, s, 2)
    grad = -np.concatenate([j.dd("w", "x"), j.dd("w", "y"), j.dd("w", "w"), np.zeros((prob.w_dim, prob.chart.fiber_rank)), j.dd("w", "pb")], axis=1)
    return -j.d("w"), grad @ _frame(prob, s)


# --------------------------------------------------------------------------
# constraint algorithm


def _null_space(a: np.ndarray, tol: float) -> np.ndarray:
    """Orthonormal basis of {v : a v = 0} by SVD with relative threshold."""
    rows, cols = a.shape
    if rows == 0:
        return np.eye(cols)
    _, sv, vt = np.linalg.svd(a)
    if sv.size == 0 or sv[0] == 0.0:
        return np.eye(cols)
    rank = int(np.sum(sv > tol * sv[0]))
    return vt[rank:].T


def _kernel(omega: np.ndarray, basis: np.ndarray, tol: float) -> np.ndarray:
    k = basis.T @ omega @ basis
    return basis @ _null_space(k, tol) if k.size else basis


@dataclass(frozen=True)
class StepResult:
    kernel: np.ndarray
    constraints: np.ndarray
    solvable: bool
    solution: np.ndarray | None


def constraint_step(omega, dH, tangent_basis=None, tol: float = DEFAULT_TOL) -> StepResult:
    """One constraint-algorithm step for i_X omega = dH on admitted directions.

    Returns the kernel of omega restricted to ``tangent_basis`` (columns),
    the consistency functionals <dH, v> on that kernel, and a particular
    solution X when they all vanish.
    """
    omega = np.asarray(omega, dtype=float)
    dH = np.asarray(dH, dtype=float)
    basis = np.eye(omega.shape[0]) if tangent_basis is None else np.asarray(tangent_basis, dtype=float)
    if basis.shape[0] != omega.shape[0] or dH.shape != (omega.shape[0],):
        raise ValueError("shapes of omega, dH and tangent_basis disagree")
    ker = _kernel(omega, basis, tol)
    cons = ker.T @ dH
    scale = max(1.0, float(np.abs(dH).max(initial=0.0)))
    solvable = bool(np.all(np.abs(cons) < tol * scale))
    sol = None
    if solvable:
        k = basis.T @ omega @ basis
        a, *_ = np.linalg.lstsq(-k, basis.T @ dH, rcond=None)
        sol = basis @ a
    return StepResult(ker, cons, solvable, sol)


@dataclass(frozen=True)
class ChainLevel:
    index: int
    admitted_dim: int
    kernel_dim: int
    constraint_values: list[float]
    consistency_residual: float
    stabilized: bool

    def to_dict(self) -> dict:
        return {
            "level": self.index,
            "admitted_dim": self.admitted_dim,
            "kernel_dim": self.kernel_dim,
            "new_constraints": len(self.constraint_values),
            "constraint_values": self.constraint_values,
            "consistency_residual": self.consistency_residual,
            "stabilized": self.stabilized,
        }


@dataclass(frozen=True)
class ConstraintChainReport:
    levels: tuple[ChainLevel, ...]
    stabilized: bool

    @property
    def nontrivial_levels(self) -> int:
        return sum(1 for lv in self.levels if lv.constraint_values)

    def to_dict(self) -> dict:
        return {
            "stabilized": self.stabilized,
            "nontrivial_levels": self.nontrivial_levels,
            "levels": [lv.to_dict() for lv in self.levels],
        }


class _Presymplectic:
    """State-space callables consumed by the generic chain."""

    def __init__(self, omega, dh, frame, dim, primary=None):
        self.omega, self.dh, self.frame, self.dim, self.primary = omega, dh, frame, dim, primary


def _fd_covectors(fn: Callable, s: np.ndarray, frame: np.ndarray) -> np.ndarray:
    """Differentials of vector function fn at s, pulled to the basis by frame."""
    cols = []
    for i in range(s.size):
        h = 1e-5 * max(1.0, abs(s[i]))
        e = np.zeros(s.size)
        e[i] = h
        cols.append((fn(s + e) - fn(s - e)) / (2 * h))
    jac = np.array(cols).T if cols else np.zeros((0, 0))
    return jac @ frame if jac.size else np.zeros((0, frame.shape[1]))


def _chain(sys: _Presymplectic, s0: np.ndarray, max_levels: int, tol: float) -> ConstraintChainReport:
    # each level holds a callable returning (values, covectors) for its new constraints
    level_fns: list[Callable] = []

    def constraint_rows(s, upto):
        vals, rows = [], []
        for fn in level_fns[:upto]:
            v, d = fn(s)
            vals.append(v)
            rows.append(d)
        if not rows:
            return np.zeros(0), np.zeros((0, sys.frame(s).shape[1]))
        return np.concatenate(vals), np.vstack(rows)

    def kernel_at(s, upto):
        _, rows = constraint_rows(s, upto)
        basis = _null_space(rows, tol)
        return _kernel(sys.omega(s), basis, tol), basis

    levels = []
    for k in range(max_levels + 1):
        ker, basis = kernel_at(s0, k)
        dh = sys.dh(s0)
        cand_vals = ker.T @ dh
        if k == 0 and sys.primary is not None and ker.shape[1]:
            def fn(s, _p=sys.primary):
                return _p(s)
        else:
            ref = ker.copy()

            def values(s, _k=k, _ref=ref):
                kk, _ = kernel_at(s, _k)
                proj = kk @ (kk.T @ _ref)
                return proj.T @ sys.dh(s)

            def fn(s, _values=values):
                return _values(s), _fd_covectors(_values, s, sys.frame(s))

        cand_vals, cand_rows = fn(s0) if ker.shape[1] else (np.zeros(0), np.zeros((0, basis.shape[0])))
        _, old_rows = constraint_rows(s0, k)
        keep = []
        rows = old_rows
        for i in range(len(cand_vals)):
            trial = np.vstack([rows, cand_rows[i : i + 1]])
            r_old = np.linalg.matrix_rank(rows, tol * max(1.0, _norm(rows))) if rows.size else 0
            r_new = np.linalg.matrix_rank(trial, tol * max(1.0, _norm(trial)))
            if r_new > r_old:
                keep.append(i)
                rows = trial
        stabilized = not keep
        resid = float(np.abs(cand_vals).max(initial=0.0))
        levels.append(
            ChainLevel(k, basis.shape[1], ker.shape[1], [float(cand_vals[i]) for i in keep], resid, stabilized)
        )
        if stabilized:
            return ConstraintChainReport(tuple(levels), True)

        def selected(s, _fn=fn, _keep=tuple(keep)):
            v, d = _fn(s)
            return v[list(_keep)], d[list(_keep)]

        level_fns.append(selected)
    return ConstraintChainReport(tuple(levels), False)


def _norm(a):
    return float(np.linalg.norm(a, 2)) if a.size else 0.0


def run_presymplectic_chain(omega_fn, dh_fn, s0, max_levels: int = 5, tol: float = DEFAULT_TOL) -> ConstraintChainReport:
    """Constraint algorithm for state-space callables with the identity frame."""
    s0 = np.asarray(s0, dtype=float)
    sys = _Presymplectic(
        lambda s: np.asarray(omega_fn(s), dtype=float),
        lambda s: np.asarray(dh_fn(s), dtype=float),
        lambda s: np.eye(s.size),
        s0.size,
    )
    return _chain(sys, s0, max_levels, tol)


def run_constraint_algorithm(
    prob: SecondOrderProblem, s: PontryaginState, max_levels: int = 5, tol: float = DEFAULT_TOL
) -> ConstraintChainReport:
    """Iterate constraint steps until the admitted space stops shrinking."""
    if prob.mode == "vakonomic":
        raise ValueError("the chain is built for second-order modes")
    m, n, r = prob.chart.base_dim, prob.chart.fiber_rank, prob.w_dim

    def unpack(v):
        x, y, w, p, pb = np.split(v, np.cumsum([m, n, r, n]))
        k = len(prob.free) if prob.elimination is not None else n
        return PontryaginState(x, y, w[:k], p, pb, w[k:])

    def pack(st):
        return np.concatenate([st.x, st.y, st.z, st.lam, st.p, st.pbar])

    sys = _Presymplectic(
        lambda v: presymplectic_matrix(prob, unpack(v)),
        lambda v: hamiltonian_differential(prob, unpack(v)),
        lambda v: _frame(prob, unpack(v)),
        m + 3 * n + r,
        primary=lambda v: primary_constraints(prob, unpack(v)),
    )
    return _chain(sys, pack(s), max_levels, tol)


# --------------------------------------------------------------------------
# regularity


@dataclass(frozen=True)
class RegularityResult:
    matrix: np.ndarray
    min_singular: float
    condition: float
    regular: bool
    form: str

    def to_dict(self) -> dict:
        return {
            "form": self.form,
            "regular": self.regular,
            "min_singular_value": self.min_singular,
            "condition_number": self.condition,
            "shape": list(self.matrix.shape),
            "matrix": self.matrix.tolist(),
        }


def _regularity(mat: np.ndarray, tol: float, form: str) -> RegularityResult:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    sv = np.linalg.svd(mat, compute_uv=False) if mat.size else np.zeros(0)
    smin = float(sv[-1]) if sv.size else 0.0
    smax = float(sv[0]) if sv.size else 0.0
    regular = bool(sv.size and smin > tol * max(1.0, smax))
    cond = smax / smin if smin > 0 else float("inf")
    return RegularityResult(mat, smin, cond, regular, form)


def regularity_test(
    prob: SecondOrderProblem, s: PontryaginState, multipliers=None, tol: float = DEFAULT_TOL, form: str = "auto"
) -> RegularityResult:
    """Matrix whose invertibility makes the first constraint level final.

    unconstrained: d2L/dz dz.  constrained: the bordered matrix
    [[d2L/dz dz + lam.d2Phi/dz dz, dPhi/dz^T], [dPhi/dz, 0]], or after an
    elimination d2L~/dz^a dz^b - pbar_alpha d2Psi^alpha/dz^a dz^b.
    vakonomic: d2L~/dy^a dy^b - p_alpha d2Psi^alpha/dy^a dy^b.
    """
    if prob.mode == "vakonomic":
        j = _vak_jet(prob, s.x, s.y[list(prob.free)], s.p[list(prob.dependent)], 2)
        return _regularity(j.dd("y", "y"), tol, "vakonomic")
    if prob.mode == "unconstrained":
        return _regularity(_q_jet(prob, s).dd("w", "w"), tol, "hessian")
    if form == "auto":
        form = "eliminated" if prob.elimination is not None and multipliers is None else "bordered"
    if form == "eliminated":
        if prob.elimination is None:
            raise ValueError("no elimination installed")
        return _regularity(_q_jet(prob, s).dd("w", "w"), tol, "eliminated")
    lam = np.zeros(len(prob.constraints)) if multipliers is None else np.asarray(multipliers, dtype=float)
    if multipliers is None and s.lam.size == len(prob.constraints):
        lam = s.lam
    z = s.z if s.z.size == prob.chart.fiber_rank else _full_z(prob, s)
    hess = prob.L.jet(s.x, s.y, z, order=2).dd("z", "z").copy()
    rows = []
    for a, phi in enumerate(prob.constraints):
        pj = phi.jet(s.x, s.y, z, order=2)
        hess += lam[a] * pj.dd("z", "z")
        rows.append(pj.d("z"))
    b = np.array(rows).reshape(len(rows), prob.chart.fiber_rank)
    k = len(rows)
    mat = np.block([[hess, b.T], [b, np.zeros((k, k))]])
    return _regularity(mat, tol, "bordered")


def _full_z(prob: SecondOrderProblem, s: PontryaginState) -> np.ndarray:
    z = np.zeros(prob.chart.fiber_rank)
    z[list(prob.free)] = s.z
    z[list(prob.dependent)] = prob.elimination.psi(s.x, s.y, s.z)
    return z


# --------------------------------------------------------------------------
# dynamics


def _derivative_flat(prob: SecondOrderProblem, v: np.ndarray) -> np.ndarray:
    """Field on the flat state (x, y, w, p, pbar); w = (z, lam)."""
    m, n, r = prob.chart.base_dim, prob.chart.fiber_rank, prob.w_dim
    x, y, p = v[:m], v[m : m + n], v[m + n + r : m + 2 * n + r]
    a = np.concatenate([v[: m + n + r], v[m + 2 * n + r :]])
    j = generating_function(prob).jet_flat(a, 2)
    g, hs = j.grad, j.hess
    iw = m + n + r
    rho = prob.chart.anchor_at(x)
    c = prob.chart.structure_at(x)
    xdot = rho @ y
    ydot = -g[iw:]
    pdot = rho.T @ g[:m] - np.einsum("abc,c,b->a", c, p, y)
    pbdot = g[m : m + n] - p
    qww = hs[m + n : iw, m + n : iw]
    rows = hs[m + n : iw]
    rhs = -(rows[:, :m] @ xdot + rows[:, m : m + n] @ ydot + rows[:, iw:] @ pbdot)
    if r:
        try:
            wdot = np.linalg.solve(qww, rhs)
        except np.linalg.LinAlgError:
            wdot = None
        if wdot is None or not np.all(np.isfinite(wdot)):
            raise RegularityError("regularity matrix is singular at the current state", qww, v.tolist())
    else:
        wdot = np.zeros(0)
    return np.concatenate([xdot, ydot, wdot, pdot, pbdot])


def optimality_field(prob: SecondOrderProblem, s: PontryaginState) -> PontryaginState:
    """Time derivative of a W_1 state; wdot keeps dQ/dw = 0 along the flow."""
    if prob.mode == "vakonomic":
        raise ValueError("use vakonomic_field for vakonomic problems")
    return PontryaginState.from_flat(prob, _derivative_flat(prob, s.flat()))


def optimality_vector_field(prob: SecondOrderProblem) -> Callable:
    """``f(t, s_flat)`` for the integrators (state order x, y, z, lam, p, pbar)."""
    if prob.mode == "vakonomic":
        raise ValueError("use vakonomic_vector_field for vakonomic problems")
    size = prob.chart.base_dim + 3 * prob.chart.fiber_rank + prob.w_dim

    def f(t, s):
        s = np.asarray(s, dtype=float)
        if s.shape != (size,):
            raise ValueError(f"state must have length {size}")
        return _derivative_flat(prob, s)

    return f


def constraint_residual(prob: SecondOrderProblem, s: PontryaginState) -> np.ndarray:
    """Primary constraint values -dQ/dw (zero on W_1)."""
    return -_q_jet(prob, s, 1).d("w")


def project_to_w1(prob: SecondOrderProblem, s: PontryaginState) -> PontryaginState:
    """Replace pbar on the w-directions so that the primary constraint holds.

    Only meaningful without multipliers: for each free direction a, the
    constraint is linear in pbar_a with unit coefficient.
    """
    if prob.uses_multipliers:
        raise ValueError("multiplier form has no explicit pbar solution")
    pbar = s.pbar.copy()
    free = list(prob.free) if prob.elimination is not None else list(range(prob.chart.fiber_rank))
    for _ in range(2):
        st = PontryaginState(s.x, s.y, s.z, s.p, pbar, s.lam)
        res = constraint_residual(prob, st)
        pbar[free] = pbar[free] - res
    return PontryaginState(s.x, s.y, s.z, s.p, pbar, s.lam)


# --------------------------------------------------------------------------
# second-order Euler-Lagrange residual


@dataclass(frozen=True)
class SecondOrderJet:
    """Base point x with y and its first three time derivatives (dy = z)."""

    x: np.ndarray
    y: np.ndarray
    dy: np.ndarray
    ddy: np.ndarray
    dddy: np.ndarray

    def __post_init__(self):
        for name in ("x", "y", "dy", "ddy", "dddy"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).ravel())


def _partial_field(f: SmoothField, name: str) -> SmoothField:
    if isinstance(f, ExprField):
        return f.partial(name)
    n = dict(f.inputs)[name]
    return CallableField((n,), f.inputs, lambda *parts: f.jet(*parts, order=1).d(name))


def second_order_el_residual(prob: SecondOrderProblem, jet: SecondOrderJet) -> np.ndarray:
    """d2/dt2 L_zA + C^C_AB y^B d/dt L_zC - d/dt L_yA - C^C_AB y^B L_yC + rho^i_A L_xi.

    Time derivatives are expanded by the chain rule along the admissible
    curve through the jet: xdot = rho y, xddot = (d rho . xdot) y + rho z.
    """
    if prob.mode != "unconstrained":
        raise ValueError("the residual is defined for unconstrained second-order problems")
    fz = prob._cache.get("Lz")
    if fz is None:
        fz = prob._cache["Lz"] = _partial_field(prob.L, "z")
        prob._cache["Ly"] = _partial_field(prob.L, "y")
    fy = prob._cache["Ly"]
    x, y, z, zd, zdd = jet.x, jet.y, jet.dy, jet.ddy, jet.dddy
    rj = prob.chart.anchor.jet(x, order=1)
    rho, drho = rj.value, rj.grad
    c = prob.chart.structure_at(x)
    xd = rho @ y
    xdd = np.einsum("iaj,j,a->i", drho, xd, y) + rho @ z
    sd = np.concatenate([xd, z, zd])
    sdd = np.concatenate([xdd, zd, zdd])
    gz = fz.jet(x, y, z, order=2)
    gy = fy.jet(x, y, z, order=1)
    lx = prob.L.jet(x, y, z, order=1).d("x")
    dz = gz.grad @ sd
    ddz = np.einsum("aij,i,j->a", gz.hess, sd, sd) + gz.grad @ sdd
    dly = gy.grad @ sd
    cy = np.einsum("abc,b->ac", c, y)
    return ddz + cy @ dz - dly - cy @ gy.value + rho.T @ lx


# --------------------------------------------------------------------------
# vakonomic (first-order constrained) dynamics


def _vakonomic_function(prob: SecondOrderProblem) -> SmoothField:
    """R(x, y^a, p_alpha) = L(x, y^a, Psi) - p_alpha Psi^alpha."""
    got = prob._cache.get("R")
    if got is not None:
        return got
    m, n = prob.chart.base_dim, prob.chart.fiber_rank
    free, dep = prob.free, prob.dependent
    k, d = len(free), len(dep)
    inputs = (("x", m), ("y", k), ("pd", d))
    if prob.symbolic:
        psi = list(prob.elimination.psi.exprs) if prob.elimination else []
        ymap = {f"y{a + 1}": Var(f"_f{j + 1}") for j, a in enumerate(free)}
        ymap.update({f"y{a + 1}": psi[al] for al, a in enumerate(dep)})
        lt = substitute(prob.L.exprs[0], ymap)
        lt = substitute(lt, {f"_f{j + 1}": Var(f"y{j + 1}") for j in range(k)})
        r = sub(lt, total(mul(Var(f"pd{al + 1}"), psi[al]) for al in range(d)))
        out: SmoothField = ExprField((), inputs, (r,))
    else:

        def rfun(x, yf, pd):
            psi = np.asarray(prob.elimination.psi(x, yf), dtype=float) if d else np.zeros(0)
            y = np.zeros(n)
            y[list(free)], y[list(dep)] = yf, psi
            return prob.L(x, y) - pd @ psi

        out = CallableField((), inputs, rfun)
    prob._cache["R"] = out
    return out


def _vak_jet(prob, x, yf, pd, order):
    return _vakonomic_function(prob).jet(x, yf, pd, order=order)


def vakonomic_field(prob: SecondOrderProblem, x, p, y_free, rcond: float = DEFAULT_TOL):
    """(xdot, pdot, y_free_dot) for the vakonomic system with elimination Psi.

    pdot_A = rho^i_A (L~_x - p_alpha Psi^alpha_x) - C^C_AB p_C v^B with
    v = (y^a, Psi^alpha); y_free_dot keeps p_a = dL~/dy^a - p_alpha dPsi^alpha/dy^a.
    """
    if prob.mode != "vakonomic":
        raise ValueError("problem is not in vakonomic mode")
    free, dep = list(prob.free), list(prob.dependent)
    x = np.atleast_1d(np.asarray(x, dtype=float)) if prob.chart.base_dim else np.zeros(0)
    p = np.atleast_1d(np.asarray(p, dtype=float))
    yf = np.atleast_1d(np.asarray(y_free, dtype=float))
    j = _vak_jet(prob, x, yf, p[dep], 2)
    v = np.zeros(prob.chart.fiber_rank)
    v[free], v[dep] = yf, -j.d("pd")
    rho = prob.chart.anchor_at(x)
    c = prob.chart.structure_at(x)
    xdot = rho @ v
    pdot = rho.T @ j.d("x") - np.einsum("abc,c,b->a", c, p, v)
    ryy = j.dd("y", "y")
    rhs = pdot[free] - j.dd("y", "x") @ xdot - j.dd("y", "pd") @ pdot[dep]
    if ryy.size:
        sv = np.linalg.svd(ryy, compute_uv=False)
        if sv[-1] <= rcond * max(1.0, sv[0]):
            raise RegularityError("vakonomic regularity matrix is singular", ryy)
        ydot = np.linalg.solve(ryy, rhs)
    else:
        ydot = np.zeros(0)
    return xdot, pdot, ydot


def vakonomic_momenta(prob: SecondOrderProblem, x, y_free, p_dependent) -> np.ndarray:
    """Full p on the first constraint level given p_alpha."""
    free, dep = list(prob.free), list(prob.dependent)
    j = _vak_jet(prob, x, y_free, p_dependent, 1)
    p = np.zeros(prob.chart.fiber_rank)
    p[free] = j.d("y")
    p[dep] = p_dependent
    return p


def vakonomic_vector_field(prob: SecondOrderProblem) -> Callable:
    """``f(t, s)`` with s = (x, y_free, p)."""
    m, n, k = prob.chart.base_dim, prob.chart.fiber_rank, len(prob.free)

    def f(t, s):
        x, yf, p = s[:m], s[m : m + k], s[m + k :]
        xdot, pdot, ydot = vakonomic_field(prob, x, p, yf)
        return np.concatenate([xdot, ydot, pdot])

    return f


# --------------------------------------------------------------------------
# symbolic elimination of constraints affine in the dependent z's


def _det(mat: list[list[Expr]]) -> Expr:
    k = len(mat)
    if k == 1:
        return mat[0][0]
    out = Num(0.0)
    for j in range(k):
        minor = [row[:j] + row[j + 1 :] for row in mat[1:]]
        term = mul(mat[0][j], _det(minor))
        out = add(out, term) if j % 2 == 0 else sub(out, term)
    return out


def solve_linear_symbolic(a: list[list[Expr]], b: list[Expr]) -> list[Expr]:
    """Solve a x = b with expression entries (numeric inverse if constant)."""
    k = len(b)
    if all(isinstance(e, Num) for row in a for e in row):
        inv = np.linalg.inv(np.array([[e.value for e in row] for row in a]))
        return [total(mul(Num(inv[i, j]), b[j]) for j in range(k)) for i in range(k)]
    if k > 4:
        raise ValueError("symbolic elimination supports at most 4 non-constant constraints")
    det = _det(a)
    out = []
    for i in range(k):
        ai = [row[:i] + [b[r]] + row[i + 1 :] for r, row in enumerate(a)]
        out.append(div(_det(ai), det))
    return out


def _solve_affine(phis: list[Expr], letter: str, dep: tuple[int, ...], n: int) -> list[Expr]:
    """Solve phi = 0 for the dependent ``letter`` coordinates; free ones renumbered."""
    free = [a for a in range(n) if a not in dep]
    dnames = [f"{letter}{a + 1}" for a in dep]
    a = [[diff(phi, nm) for nm in dnames] for phi in phis]
    if any(free_variables(e) & set(dnames) for row in a for e in row):
        raise ValueError(f"constraints are not affine in the dependent {letter} coordinates")
    b = [neg(substitute(phi, {nm: Num(0.0) for nm in dnames})) for phi in phis]
    psi = solve_linear_symbolic(a, b)
    rename = {f"{letter}{a_ + 1}": Var(f"_t{j + 1}") for j, a_ in enumerate(free)}
    back = {f"_t{j + 1}": Var(f"{letter}{j + 1}") for j in range(len(free))}
    return [substitute(substitute(e, rename), back) for e in psi]


def _check_dependent(dependent, count: int, n: int) -> tuple[int, ...]:
    dep = tuple(int(a) for a in dependent)
    if len(dep) != count:
        raise ValueError("one dependent coordinate per constraint is required")
    if len(set(dep)) != len(dep) or not all(0 <= a < n for a in dep):
        raise ValueError("dependent indices must be distinct and in range")
    return dep


def eliminate(prob: SecondOrderProblem, dependent: Sequence[int]) -> SecondOrderProblem:
    """Install z^alpha = Psi^alpha(x, y, z^a) solved from constraints affine in z^alpha."""
    if prob.mode != "constrained_multipliers" or not prob.symbolic:
        raise ValueError("elimination needs a symbolic constrained problem")
    m, n = prob.chart.base_dim, prob.chart.fiber_rank
    dep = _check_dependent(dependent, len(prob.constraints), n)
    psi = _solve_affine([phi.exprs[0] for phi in prob.constraints], "z", dep, n)
    field_ = ExprField((len(dep),), (("x", m), ("y", n), ("z", n - len(dep))), tuple(psi))
    return SecondOrderProblem(prob.chart, prob.L, prob.constraints, prob.mode, Elimination(dep, field_))


def vakonomic_problem(chart: AlgebroidChart, L: ExprField, constraints: Sequence[ExprField] = (),
                      dependent: Sequence[int] | None = None) -> SecondOrderProblem:
    """Vakonomic problem with y^alpha = Psi^alpha(x, y^a) solved from constraints affine in y^alpha.

    ``dependent`` defaults to the last len(constraints) fiber directions.
    """
    m, n = chart.base_dim, chart.fiber_rank
    constraints = tuple(constraints)
    if dependent is None:
        dependent = range(n - len(constraints), n)
    dep = _check_dependent(dependent, len(constraints), n)
    if not constraints:
        return SecondOrderProblem(chart, L, (), "vakonomic")
    psi = _solve_affine([phi.exprs[0] for phi in constraints], "y", dep, n)
    field_ = ExprField((len(dep),), (("x", m), ("y", n - len(dep))), tuple(psi))
    return SecondOrderProblem(chart, L, constraints, "vakonomic", Elimination(dep, field_))
