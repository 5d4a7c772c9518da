"""Lie algebroids in a single local chart.

A chart is the pair (anchor, structure): ``anchor(x)`` is the m x n matrix
rho^i_A and ``structure(x)`` the n x n x n array indexed ``[A, B, C]`` holding
C^C_{AB}, the C-component of the bracket of basis sections A and B.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .calculus import (
    EvaluationError,
    Expr,
    ExprField,
    Num,
    SmoothField,
    as_expr,
    diff,
    free_variables,
    mul,
    neg,
    parse,
    sub,
    substitute,
    total,
    variable_names,
)

DEFAULT_TOL = 1e-8


@dataclass(frozen=True)
class AlgebroidChart:
    base_dim: int
    fiber_rank: int
    anchor: SmoothField
    structure: SmoothField
    chart_name: str = "custom"
    sample_box: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        m, n = self.base_dim, self.fiber_rank
        if m < 0 or n < 1:
            raise ValueError("need base_dim >= 0 and fiber_rank >= 1")
        if tuple(self.anchor.shape) != (m, n) or tuple(self.anchor.inputs) != (("x", m),):
            raise ValueError(f"anchor must map x[{m}] to an {m}x{n} matrix")
        if tuple(self.structure.shape) != (n, n, n) or tuple(self.structure.inputs) != (("x", m),):
            raise ValueError(f"structure must map x[{m}] to an {n}x{n}x{n} array")

    @property
    def symbolic(self) -> bool:
        return isinstance(self.anchor, ExprField) and isinstance(self.structure, ExprField)

    def _constant(self, which: str):
        """Value of a field that does not depend on x, else None (cached)."""
        cache = self.__dict__.setdefault("_const", {})
        if which not in cache:
            f = getattr(self, which)
            const = isinstance(f, ExprField) and not any(free_variables(e) for e in f.exprs)
            cache[which] = f.jet(np.zeros(self.base_dim)).value.copy() if const else None
            if cache[which] is not None:
                cache[which].setflags(write=False)
        return cache[which]

    def anchor_at(self, x) -> np.ndarray:
        c = self._constant("anchor")
        return c if c is not None else self.anchor.jet(x).value

    def structure_at(self, x) -> np.ndarray:
        c = self._constant("structure")
        return c if c is not None else self.structure.jet(x).value

    def anchor_exprs(self) -> np.ndarray:
        return self.anchor.expr_array()

    def structure_exprs(self) -> np.ndarray:
        return self.structure.expr_array()


@dataclass(frozen=True)
class AlgebroidState:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        for name in ("x", "y"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class SecondOrderState:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        for name in ("x", "y", "z"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
            object.__setattr__(self, name, arr)


# --------------------------------------------------------------------------
# construction


def _structure_exprs(n: int, entries: Mapping[tuple[int, int, int], object], params) -> list[Expr]:
    """Flattened [A, B, C] array from entries on A<B (or A>B, negated)."""
    seen: dict[tuple[int, int, int], tuple[int, int, int]] = {}
    arr = [[[Num(0.0)] * n for _ in range(n)] for _ in range(n)]
    for key, value in entries.items():
        a, b, c = (int(k) for k in key)
        if not all(0 <= k < n for k in (a, b, c)):
            raise ValueError(f"structure index {key} out of range for rank {n}")
        if a == b:
            e = as_expr(value) if not isinstance(value, str) else None
            if e is None or not (isinstance(e, Num) and e.value == 0.0):
                raise ValueError(f"structure entry {key} on the diagonal must vanish")
            continue
        lo, hi, sign = (a, b, 1) if a < b else (b, a, -1)
        if (lo, hi, c) in seen:
            raise ValueError(f"structure entry {key} duplicates {seen[(lo, hi, c)]}")
        seen[(lo, hi, c)] = key
        e = _coerce(value, params)
        if sign < 0:
            e = neg(e)
        arr[lo][hi][c] = e
        arr[hi][lo][c] = neg(e)
    return [arr[a][b][c] for a in range(n) for b in range(n) for c in range(n)]


def _coerce(value, params, names=None) -> Expr:
    if isinstance(value, str):
        allowed = set(names or ()) | set(params or {})
        e = parse(value, allowed) if names is not None else as_expr(value)
    else:
        e = as_expr(value)
    return substitute(e, params) if params else e


def make_chart(
    base_dim: int,
    fiber_rank: int,
    anchor,
    structure: Mapping[tuple[int, int, int], object],
    name: str = "custom",
    params: Mapping[str, float] | None = None,
    sample_box: tuple[float, float] = (-1.0, 1.0),
) -> AlgebroidChart:
    """Chart from an m x n anchor table and sparse structure entries.

    ``structure`` maps 0-based ``(A, B, C)`` to C^C_{AB}; only one of each
    (A, B)/(B, A) pair may be given, so antisymmetry holds exactly.
    """
    m, n = int(base_dim), int(fiber_rank)
    params = dict(params or {})
    names = variable_names(x=m)
    anchor = np.asarray(anchor, dtype=object).reshape(m, n) if m else np.empty((0, n), dtype=object)
    rho = [_coerce(v, params, names) for v in anchor.ravel()]
    cexprs = []
    for key, value in structure.items():
        cexprs.append((key, _coerce(value, params, names) if isinstance(value, str) else value))
    flat = _structure_exprs(n, dict(cexprs), {})
    return AlgebroidChart(
        m,
        n,
        ExprField((m, n), (("x", m),), tuple(rho)),
        ExprField((n, n, n), (("x", m),), tuple(flat)),
        name,
        tuple(sample_box),
    )


def _constant_entries(constants, n: int | None = None) -> dict[tuple[int, int, int], float]:
    """Sparse A<B entries from a full array or a mapping; checks antisymmetry."""
    if isinstance(constants, Mapping):
        return {tuple(int(i) for i in k): float(v) for k, v in constants.items()}
    arr = np.asarray(constants, dtype=float)
    if arr.ndim != 3 or len(set(arr.shape)) != 1:
        raise ValueError("structure constants must be an n x n x n array")
    if not np.allclose(arr, -arr.transpose(1, 0, 2), atol=1e-14, rtol=0):
        raise ValueError("structure constants are not antisymmetric in the lower indices")
    k = arr.shape[0]
    return {(a, b, c): arr[a, b, c] for a in range(k) for b in range(a + 1, k) for c in range(k) if arr[a, b, c] != 0}


def _rank_of(entries, fallback: int | None = None) -> int:
    if fallback is not None:
        return fallback
    return 1 + max((max(k) for k in entries), default=0)


def so3_constants() -> np.ndarray:
    eps = np.zeros((3, 3, 3))
    for a, b, c in itertools.permutations(range(3)):
        eps[a, b, c] = 1.0 if (a, b, c) in ((0, 1, 2), (1, 2, 0), (2, 0, 1)) else -1.0
    return eps


def se2_constants() -> np.ndarray:
    c = np.zeros((3, 3, 3))
    c[0, 2, 1], c[2, 0, 1] = -1.0, 1.0
    c[1, 2, 0], c[2, 1, 0] = 1.0, -1.0
    return c


def tangent_bundle(m: int) -> AlgebroidChart:
    return make_chart(m, m, np.eye(m), {}, name=f"tangent_bundle({m})")


def lie_algebra(constants, name: str = "lie_algebra") -> AlgebroidChart:
    arr = constants if isinstance(constants, Mapping) else np.asarray(constants, dtype=float)
    n = arr.shape[0] if not isinstance(arr, Mapping) else _rank_of(arr)
    return make_chart(0, n, np.empty((0, n)), _constant_entries(constants), name=name)


def action_algebroid(m: int, constants, generators) -> AlgebroidChart:
    """M x g with anchor -xi_M; ``generators`` is an m x n table (column A is xi_A,M)."""
    ent = _constant_entries(constants)
    n = np.asarray(constants).shape[0] if not isinstance(constants, Mapping) else _rank_of(ent)
    if isinstance(generators, SmoothField):
        if not isinstance(generators, ExprField):
            raise TypeError("action_algebroid needs expression-backed generators")
        gen = generators.expr_array()
    else:
        names = variable_names(x=m)
        gen = np.asarray(generators, dtype=object).reshape(m, n)
        gen = np.vectorize(lambda v: _coerce(v, {}, names), otypes=[object])(gen)
    anchor = np.vectorize(neg, otypes=[object])(gen)
    return make_chart(m, n, anchor, ent, name="action_algebroid")


def curvature_of(m: int, constants, connection) -> np.ndarray:
    """Curvature B^A_{ij} of a local connection A^A_i (array [i, j, A])."""
    c = np.asarray(constants, dtype=float)
    d = c.shape[0]
    names = variable_names(x=m)
    conn = np.asarray(connection, dtype=object).reshape(m, d)
    conn = np.vectorize(lambda v: _coerce(v, {}, names), otypes=[object])(conn)
    out = np.empty((m, m, d), dtype=object)
    for i, j, a in itertools.product(range(m), range(m), range(d)):
        e = sub(diff(conn[j, a], names[i]), diff(conn[i, a], names[j]))
        quad = total(
            mul(Num(c[b, cc, a]), mul(conn[i, b], conn[j, cc]))
            for b in range(d)
            for cc in range(d)
            if c[b, cc, a] != 0
        )
        out[i, j, a] = sub(e, quad)
    return out


def atiyah_trivial(m: int, constants, connection, curvature=None) -> AlgebroidChart:
    """Trivial-bundle Atiyah algebroid in the basis (e_i, e_A).

    ``connection[i][B]`` holds A^B_i(x); ``curvature[i][j][A]`` holds
    B^A_{ij}(x) and defaults to the curvature of the connection.
    """
    c = np.asarray(constants, dtype=float)
    _constant_entries(c)
    d = c.shape[0]
    n = m + d
    names = variable_names(x=m)
    conn = np.asarray(connection, dtype=object).reshape(m, d)
    conn = np.vectorize(lambda v: _coerce(v, {}, names), otypes=[object])(conn)
    if curvature is None:
        curv = curvature_of(m, c, conn)
    else:
        curv = np.asarray(curvature, dtype=object).reshape(m, m, d)
        curv = np.vectorize(lambda v: _coerce(v, {}, names), otypes=[object])(curv)
    entries: dict[tuple[int, int, int], Expr] = {}
    for i in range(m):
        for j in range(i + 1, m):
            for a in range(d):
                entries[(i, j, m + a)] = neg(curv[i, j, a])
        for a in range(d):
            for cc in range(d):
                e = total(mul(Num(c[a, b, cc]), conn[i, b]) for b in range(d) if c[a, b, cc] != 0)
                entries[(i, m + a, m + cc)] = e
    for a in range(d):
        for b in range(a + 1, d):
            for cc in range(d):
                if c[a, b, cc] != 0:
                    entries[(m + a, m + b, m + cc)] = Num(c[a, b, cc])
    anchor = np.zeros((m, n))
    anchor[:, :m] = np.eye(m)
    return make_chart(m, n, anchor, entries, name="atiyah_trivial")


def elroy_beanie_constants(I1: float, I2: float) -> tuple[float, float, float]:
    """(k1, k2, s) with k1 = sqrt(I2/(I1(I1+I2))), k2 = 1/sqrt(I1+I2), s = sqrt((I1+I2)/(I1 I2))."""
    k1 = float(np.sqrt(I2 / (I1 * (I1 + I2))))
    k2 = float(1.0 / np.sqrt(I1 + I2))
    s = float(np.sqrt((I1 + I2) / (I1 * I2)))
    return k1, k2, s


def elroy_beanie(I1: float = 1.0, I2: float = 1.0, m: float = 1.0) -> AlgebroidChart:
    """Reduced algebroid of the two-body planar beanie over the relative angle.

    The mass ``m`` only rescales the translational basis sections and does
    not enter the structure functions.
    """
    if min(I1, I2, m) <= 0:
        raise ValueError("inertias and mass must be positive")
    k1, k2, s = elroy_beanie_constants(I1, I2)
    entries = {(0, 1, 2): -k1, (0, 2, 1): k1, (1, 3, 2): -k2, (2, 3, 1): k2}
    return make_chart(1, 4, [[s, 0.0, 0.0, 0.0]], entries, name="elroy_beanie")


BUILTINS = ("tangent_bundle", "lie_algebra", "action_algebroid", "atiyah_trivial", "so3", "se2", "elroy_beanie")


def builtin_chart(name: str, params: Mapping[str, object] | None = None) -> AlgebroidChart:
    params = dict(params or {})
    try:
        if name == "tangent_bundle":
            return tangent_bundle(int(params.get("m", 1)))
        if name == "lie_algebra":
            return lie_algebra(params["constants"])
        if name == "action_algebroid":
            return action_algebroid(int(params["m"]), params["constants"], params["generators"])
        if name == "atiyah_trivial":
            return atiyah_trivial(
                int(params["m"]), params["constants"], params["connection"], params.get("curvature")
            )
        if name == "so3":
            return lie_algebra(so3_constants(), name="so3")
        if name == "se2":
            return lie_algebra(se2_constants(), name="se2")
        if name == "elroy_beanie":
            return elroy_beanie(float(params.get("I1", 1.0)), float(params.get("I2", 1.0)), float(params.get("m", 1.0)))
    except KeyError as err:
        raise ValueError(f"builtin chart {name!r} is missing parameter {err.args[0]!r}") from None
    raise ValueError(f"unknown builtin chart {name!r}; known: {', '.join(BUILTINS)}")


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ValidationReport:
    antisymmetry: float
    anchor_residual: float
    jacobi_residual: float
    worst_sample: dict
    tol: float
    n_samples: int
    sample_box: tuple[float, float]
    passed: bool = field(init=False)

    def __post_init__(self):
        ok = max(self.antisymmetry, self.anchor_residual, self.jacobi_residual) < self.tol
        object.__setattr__(self, "passed", bool(ok))

    @property
    def max_residual(self) -> float:
        return max(self.antisymmetry, self.anchor_residual, self.jacobi_residual)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tol": self.tol,
            "n_samples": self.n_samples,
            "sample_box": list(self.sample_box),
            "sample_box_note": "sampling box is a proxy for the chart domain",
            "antisymmetry_residual": self.antisymmetry,
            "anchor_residual": self.anchor_residual,
            "jacobi_residual": self.jacobi_residual,
            "worst_sample": self.worst_sample,
        }


def default_samples(chart: AlgebroidChart, count: int = 20, seed: int = 0, box=None) -> np.ndarray:
    lo, hi = box if box is not None else chart.sample_box
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, size=(count, chart.base_dim))


def structure_residuals(chart: AlgebroidChart, x) -> tuple[float, float, float, dict]:
    """Max antisymmetry, anchor-compatibility and Jacobi residuals at one point."""
    rj = chart.anchor.jet(x, order=1)
    cj = chart.structure.jet(x, order=1)
    rho, drho = rj.value, rj.grad  # [i, A], [i, A, j]
    c, dc = cj.value, cj.grad  # [A, B, C], [A, B, C, j]
    for arr in (rho, drho, c, dc):
        if not np.all(np.isfinite(arr)):
            raise EvaluationError("non-finite structure data", f"x = {list(np.atleast_1d(x))}")
    anti = np.abs(c + c.transpose(1, 0, 2))
    # rho_A(rho_B) - rho_B(rho_A) - rho_C C^C_AB, indexed [i, A, B]
    t = np.einsum("ja,ibj->iab", rho, drho)
    eq1 = t - t.transpose(0, 2, 1) - np.einsum("ic,abc->iab", rho, c)
    # J[A,B,C,D] = rho^i_A d_i C^D_BC + C^D_AF C^F_BC, summed cyclically
    j = np.einsum("ia,bcdi->abcd", rho, dc) + np.einsum("afd,bcf->abcd", c, c)
    eq2 = j + j.transpose(1, 2, 0, 3) + j.transpose(2, 0, 1, 3)
    locs = {}
    for key, arr in (("antisymmetry", anti), ("anchor", eq1), ("jacobi", eq2)):
        if arr.size:
            locs[key] = [int(i) for i in np.unravel_index(np.argmax(np.abs(arr)), arr.shape)]
    mx = lambda a: float(np.abs(a).max()) if a.size else 0.0  # noqa: E731
    return mx(anti), mx(eq1), mx(eq2), locs


def validate_chart(chart: AlgebroidChart, samples=None, tol: float = DEFAULT_TOL) -> ValidationReport:
    """Check antisymmetry and both structure equations at sample points."""
    if samples is None:
        samples = default_samples(chart)
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2:
        samples = samples.reshape(-1, chart.base_dim) if chart.base_dim else np.zeros((max(len(samples), 1), 0))
    if len(samples) == 0:
        raise ValueError("validation needs at least one sample")
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    best = [0.0, 0.0, 0.0]
    worst: dict = {}
    for k, x in enumerate(samples):
        try:
            vals = structure_residuals(chart, x)
        except EvaluationError as err:
            raise EvaluationError(f"sample {k} ({list(x)}) failed", str(err)) from None
        for slot, key in enumerate(("antisymmetry", "anchor", "jacobi")):
            if vals[slot] > best[slot] or key not in worst:
                if vals[slot] >= best[slot]:
                    best[slot] = vals[slot]
                    worst[key] = {"sample": k, "x": [float(v) for v in x], "index": vals[3].get(key)}
    return ValidationReport(best[0], best[1], best[2], worst, float(tol), len(samples), tuple(chart.sample_box))


def admissibility_residual(chart: AlgebroidChart, x, y, xdot) -> np.ndarray:
    """xdot - rho(x) y; zero iff (x, y, xdot) is admissible."""
    x = np.atleast_1d(np.asarray(x, dtype=float)) if chart.base_dim else np.zeros(0)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    xdot = np.atleast_1d(np.asarray(xdot, dtype=float)) if chart.base_dim else np.zeros(0)
    if x.size != chart.base_dim or xdot.size != chart.base_dim or y.size != chart.fiber_rank:
        raise ValueError(
            f"dimension mismatch: chart has m={chart.base_dim}, n={chart.fiber_rank}; "
            f"got x[{x.size}], y[{y.size}], xdot[{xdot.size}]"
        )
    return xdot - chart.anchor_at(x) @ y
