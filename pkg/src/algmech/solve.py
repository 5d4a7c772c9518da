"""Integrators, shooting, and brute-force oracles."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.integrate import RK45

from .errors import NonConvergenceError
from .mechanics import LagrangianProblem
from .sorusk import SecondOrderProblem


class IntegrationError(RuntimeError):
    def __init__(self, message: str, time: float | None = None):
        super().__init__(message)
        self.time = time


# --------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class Trajectory:
    """Samples of an integrated state with Hermite dense output.

    ``derivs`` holds the field at each sample; monitors are recomputed from
    the stored states, never integrated.
    """

    t: np.ndarray
    states: np.ndarray
    derivs: np.ndarray
    labels: tuple[str, ...] = ()
    monitors: Mapping[str, np.ndarray] = field(default_factory=dict)
    h: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if t.ndim != 1 or len(t) != len(self.states) or len(t) != len(self.derivs):
            raise ValueError("grid, samples and derivatives must have equal length")
        if len(t) > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("time grid must be strictly increasing")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"s{i + 1}" for i in range(self.states.shape[1])))

    @property
    def T(self) -> float:
        return float(self.t[-1])

    def column(self, channel: int | str) -> int:
        if isinstance(channel, str):
            return self.labels.index(channel)
        return int(channel)

    def __call__(self, tq) -> np.ndarray:
        """Cubic Hermite interpolation between samples."""
        tq = np.asarray(tq, dtype=float)
        scalar = tq.ndim == 0
        tq = np.atleast_1d(tq)
        if np.any(tq < self.t[0] - 1e-12) or np.any(tq > self.t[-1] + 1e-12):
            raise ValueError("query time outside the trajectory")
        k = np.clip(np.searchsorted(self.t, tq, side="right") - 1, 0, len(self.t) - 2)
        t0, t1 = self.t[k], self.t[k + 1]
        dt = (t1 - t0)[:, None]
        u = ((tq - t0) / (t1 - t0))[:, None]
        h00 = 2 * u**3 - 3 * u**2 + 1
        h10 = u**3 - 2 * u**2 + u
        h01 = -2 * u**3 + 3 * u**2
        h11 = u**3 - u**2
        out = h00 * self.states[k] + h10 * dt * self.derivs[k] + h01 * self.states[k + 1] + h11 * dt * self.derivs[k + 1]
        return out[0] if scalar else out

    def csv_header(self) -> list[str]:
        head = ["t", *self.labels]
        for name, vals in self.monitors.items():
            vals = np.asarray(vals)
            head += [name] if vals.ndim == 1 else [f"{name}{j + 1}" for j in range(vals.shape[1])]
        return head

    def to_csv(self, target=None) -> str:
        """Write with 17 significant digits; returns the text."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        cols = [self.t[:, None], self.states]
        for vals in self.monitors.values():
            vals = np.asarray(vals, dtype=float)
            cols.append(vals[:, None] if vals.ndim == 1 else vals)
        table = np.hstack(cols)
        for row in table:
            w.writerow([f"{v:.17g}" for v in row])
        text = buf.getvalue()
        if target is not None:
            with open(target, "w", newline="") as fh:
                fh.write(text)
        return text


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


def compute_monitors(t, states, monitors: Mapping[str, Callable] | None) -> dict[str, np.ndarray]:
    out = {}
    for name, fn in (monitors or {}).items():
        out[name] = np.array([fn(ti, si) for ti, si in zip(t, states)], dtype=float)
    return out


# --------------------------------------------------------------------------
# integration


def _eval(f, t, s):
    try:
        out = np.asarray(f(t, s), dtype=float)
    except Exception as err:
        err.time = t
        raise
    if not np.all(np.isfinite(out)):
        raise IntegrationError(f"field returned non-finite values at t={t:.6g}", t)
    return out


def integrate(
    f: Callable,
    s0,
    T: float,
    method: str = "rk4",
    h: float = 1e-3,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    monitors: Mapping[str, Callable] | None = None,
    labels: Sequence[str] = (),
) -> Trajectory:
    """Integrate s' = f(t, s) on [0, T].

    rk4 uses N = ceil(T/h) equal steps; rk45 is Dormand-Prince with step
    control.  Dense output is cubic Hermite in both cases.
    """
    s0 = np.asarray(s0, dtype=float).copy()
    if T <= 0:
        raise ValueError("horizon must be positive")
    if method == "rk4":
        if h <= 0:
            raise ValueError("step must be positive")
        steps = max(1, math.ceil(T / h - 1e-9))
        dt = T / steps
        ts = np.linspace(0.0, T, steps + 1)
        states = np.empty((steps + 1, s0.size))
        derivs = np.empty_like(states)
        s = s0
        k1 = _eval(f, 0.0, s)
        for i in range(steps):
            t = ts[i]
            states[i], derivs[i] = s, k1
            k2 = _eval(f, t + dt / 2, s + dt / 2 * k1)
            k3 = _eval(f, t + dt / 2, s + dt / 2 * k2)
            k4 = _eval(f, t + dt, s + dt * k3)
            s = s + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            k1 = _eval(f, ts[i + 1], s)
        states[-1], derivs[-1] = s, k1
        nominal = dt
    elif method == "rk45":
        if rtol <= 0 or atol <= 0:
            raise ValueError("tolerances must be positive")
        solver = RK45(lambda t, s: _eval(f, t, s), 0.0, s0, T, rtol=rtol, atol=atol)
        ts, states, derivs = [0.0], [s0], [_eval(f, 0.0, s0)]
        while solver.status == "running":
            msg = solver.step()
            if solver.status == "failed":
                raise IntegrationError(f"rk45 step underflow at t={solver.t:.6g}: {msg}", solver.t)
            ts.append(solver.t)
            states.append(solver.y.copy())
            derivs.append(_eval(f, solver.t, solver.y))
        ts, states, derivs = np.array(ts), np.array(states), np.array(derivs)
        nominal = float(np.max(np.diff(ts)))
    else:
        raise ValueError(f"unknown method {method!r}")
    mon = compute_monitors(ts, states, monitors)
    return Trajectory(ts, states, derivs, tuple(labels), mon, nominal)


def finite_difference_jet(traj: Trajectory, channel: int | str, order: int, t: float, step: float | None = None) -> float:
    """Five-point central difference of a channel of the dense output."""
    if order not in (1, 2, 3):
        raise ValueError("order must be 1, 2 or 3")
    d = max(1e-3, 10 * traj.h) if step is None else step
    if t - 2 * d < traj.t[0] - 1e-12 or t + 2 * d > traj.t[-1] + 1e-12:
        raise ValueError("stencil leaves the trajectory")
    col = traj.column(channel)
    f = traj(t + d * np.arange(-2, 3))[:, col]
    if order == 1:
        return float((f[0] - 8 * f[1] + 8 * f[3] - f[4]) / (12 * d))
    if order == 2:
        return float((-f[0] + 16 * f[1] - 30 * f[2] + 16 * f[3] - f[4]) / (12 * d * d))
    return float((-f[0] + 2 * f[1] - 2 * f[3] + f[4]) / (2 * d**3))


# --------------------------------------------------------------------------
# shooting


@dataclass(frozen=True)
class ShootingProblem:
    """Square two-point problem.

    ``initial_state(u)`` maps the unknowns to s(0); ``residual(s0, sT)``
    returns the terminal mismatch with as many entries as unknowns.
    """

    field: Callable
    T: float
    initial_state: Callable
    residual: Callable
    n_unknowns: int
    segments: int = 1
    method: str = "rk4"
    h: float = 1e-3
    labels: tuple[str, ...] = ()


@dataclass(frozen=True)
class ShootingResult:
    converged: bool
    residual_norm: float
    iterations: int
    unknowns: np.ndarray
    history: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
            "unknowns": [float(v) for v in self.unknowns],
            "residual_history": list(self.history),
        }


def _flow(prob: ShootingProblem, s0, t0, t1):
    tr = integrate(lambda t, s: prob.field(t0 + t, s), s0, t1 - t0, prob.method, prob.h)
    return tr


def _segment_times(prob: ShootingProblem):
    return np.linspace(0.0, prob.T, prob.segments + 1)


def _full_residual(prob: ShootingProblem, v: np.ndarray) -> np.ndarray:
    k = prob.n_unknowns
    u = v[:k]
    s0 = np.asarray(prob.initial_state(u), dtype=float)
    d = s0.size
    nodes = [s0] + [v[k + j * d : k + (j + 1) * d] for j in range(prob.segments - 1)]
    times = _segment_times(prob)
    res = []
    end = None
    for j, sj in enumerate(nodes):
        end = _flow(prob, sj, times[j], times[j + 1]).states[-1]
        if j + 1 < len(nodes):
            res.append(end - nodes[j + 1])
    res.insert(0, np.atleast_1d(np.asarray(prob.residual(s0, end), dtype=float)))
    return np.concatenate(res)


def shoot(
    prob: ShootingProblem,
    guess,
    newton_tol: float = 1e-10,
    max_iter: int = 20,
    min_step: float = 2.0**-10,
) -> tuple[ShootingResult, Trajectory]:
    """Damped Newton on the (multiple) shooting map with a finite-difference Jacobian."""
    guess = np.asarray(guess, dtype=float).ravel()
    if guess.size != prob.n_unknowns:
        raise ValueError(f"expected {prob.n_unknowns} unknowns, got {guess.size}")
    s0 = np.asarray(prob.initial_state(guess), dtype=float)
    v = guess.copy()
    if prob.segments > 1:
        times = _segment_times(prob)
        tr = integrate(prob.field, s0, prob.T, prob.method, prob.h)
        v = np.concatenate([guess] + [tr(times[j]) for j in range(1, prob.segments)])
    r = _full_residual(prob, v)
    if r.size != v.size:
        raise ValueError(f"shooting system is not square: {v.size} unknowns, {r.size} residuals")
    norm = float(np.linalg.norm(r))
    history = [norm]
    it = 0
    while norm >= newton_tol and it < max_iter:
        jac = np.empty((r.size, v.size))
        for i in range(v.size):
            step = 1e-7 * max(1.0, abs(v[i]))
            e = np.zeros(v.size)
            e[i] = step
            jac[:, i] = (_full_residual(prob, v + e) - r) / step
        try:
            delta = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError as err:
            res = ShootingResult(False, norm, it, v[: prob.n_unknowns], tuple(history))
            raise NonConvergenceError(f"singular shooting Jacobian at iteration {it}", res) from err
        lam = 1.0
        while True:
            trial = v + lam * delta
            try:
                rt = _full_residual(prob, trial)
                nt = float(np.linalg.norm(rt))
            except (ArithmeticError, ValueError, IntegrationError):
                nt = math.inf
            if nt < norm or lam <= min_step:
                break
            lam /= 2
        it += 1
        if not math.isfinite(nt):
            break
        v, r, norm = trial, rt, nt
        history.append(norm)
    u = v[: prob.n_unknowns]
    result = ShootingResult(bool(norm < newton_tol), norm, it, u, tuple(history))
    traj = integrate(prob.field, prob.initial_state(u), prob.T, prob.method, prob.h, labels=prob.labels)
    return result, traj


# --------------------------------------------------------------------------
# oracles


@dataclass(frozen=True)
class DiscretePath:
    """Uniform samples of an admissible curve; z is required for second-order actions."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray | None = None

    @property
    def h(self) -> float:
        return float(self.t[1] - self.t[0])


def admissible_path(chart, y_of_t: Callable, z_of_t: Callable | None, x0, T: float, N: int, substeps: int = 20) -> DiscretePath:
    """Sample y(t) and integrate xdot = rho(x) y(t) with fine RK4."""
    t = np.linspace(0.0, T, N)
    m = chart.base_dim
    xs = np.zeros((N, m))
    x = np.asarray(x0, dtype=float).copy()
    xs[0] = x
    if m:
        def g(tt, xx):
            return chart.anchor_at(xx) @ np.asarray(y_of_t(tt), dtype=float)

        for j in range(N - 1):
            tr = integrate(lambda tt, xx: g(t[j] + tt, xx), x, t[j + 1] - t[j], "rk4", (t[j + 1] - t[j]) / substeps)
            x = tr.states[-1]
            xs[j + 1] = x
    ys = np.array([y_of_t(tt) for tt in t], dtype=float).reshape(N, -1)
    zs = None if z_of_t is None else np.array([z_of_t(tt) for tt in t], dtype=float).reshape(N, -1)
    return DiscretePath(t, xs, ys, zs)


def oracle_action_gradient(prob, path: DiscretePath, eps: float | None = None) -> np.ndarray:
    """Gradient of the trapezoid action under admissible variations.

    For a node k and direction A the variation generated by eta = e_A at
    node k is dx = rho eta, dy = eta' + C(x)(y, eta) (eta' by central
    differences) and, for second-order actions, dz = (dy)'.  Each entry is
    the central difference of the action along that variation divided by h.
    Rows are nodes whose stencil avoids both endpoints: 2..N-3 (first order)
    or 3..N-4 (second order).
    """
    second = isinstance(prob, SecondOrderProblem)
    if not second and not isinstance(prob, LagrangianProblem):
        raise TypeError("expected a LagrangianProblem or SecondOrderProblem")
    if second and path.z is None:
        raise ValueError("second-order actions need z samples")
    chart = prob.chart
    N, n = path.y.shape
    h = path.h
    eps = 1e-3 * h if eps is None else eps
    pad = 3 if second else 2
    weights = np.full(N, h)
    weights[0] = weights[-1] = h / 2

    def lag(j, dx, dy, dz):
        if second:
            return prob.L(path.x[j] + dx, path.y[j] + dy, path.z[j] + dz)
        return prob.L(path.x[j] + dx, path.y[j] + dy)

    out = np.zeros((N - 2 * pad, n))
    for k in range(pad, N - pad):
        for a in range(n):
            eta = {k: np.eye(n)[a]}
            nodes = range(max(0, k - 2), min(N, k + 3))

            def dy_at(j):
                e_next = eta.get(j + 1, np.zeros(n))
                e_prev = eta.get(j - 1, np.zeros(n))
                out_ = (e_next - e_prev) / (2 * h)
                if j in eta:
                    c = chart.structure_at(path.x[j])
                    out_ = out_ + np.einsum("abc,a,b->c", c, path.y[j], eta[j])
                return out_

            total = 0.0
            for j in nodes:
                dx = chart.anchor_at(path.x[j]) @ eta.get(j, np.zeros(n)) if chart.base_dim else np.zeros(0)
                dy = dy_at(j)
                dz = None
                if second:
                    dz = (dy_at(j + 1) - dy_at(j - 1)) / (2 * h)
                    plus = lag(j, eps * dx, eps * dy, eps * dz)
                    minus = lag(j, -eps * dx, -eps * dy, -eps * dz)
                else:
                    plus = lag(j, eps * dx, eps * dy, None)
                    minus = lag(j, -eps * dx, -eps * dy, None)
                total += weights[j] * (plus - minus)
            out[k - pad, a] = total / (2 * eps * h)
    return out
