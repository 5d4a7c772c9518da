"""Command line front end: problem files, dispatch and result files.

Exit codes: 0 success, 1 input/output failure, 2 solver did not converge,
3 regularity failure, 4 schema or structure validation failure.
"""
from __future__ import annotations

import argparse
import copy
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import algebroid as alg
from .calculus import ExprField, ExpressionError, Num, as_expr, neg, parse, to_source
from .errors import NonConvergenceError, RegularityError
from .mechanics import (
    HamiltonianProblem,
    LagrangianProblem,
    el_vector_field,
    energy,
    hamilton_vector_field,
)
from .algebroid import AlgebroidState
from .ocp import ControlProblem, build_fully_actuated, build_underactuated, full_acceleration
from .solve import ShootingProblem, finite_difference_jet, integrate, shoot
from .sorusk import (
    PontryaginState,
    SecondOrderJet,
    SecondOrderProblem,
    constraint_residual,
    eliminate,
    optimality_vector_field,
    pontryagin_hamiltonian,
    project_to_w1,
    regularity_test,
    run_constraint_algorithm,
    second_order_el_residual,
    vakonomic_momenta,
    vakonomic_problem,
    vakonomic_vector_field,
)

EXIT_OK, EXIT_IO, EXIT_NONCONVERGED, EXIT_REGULARITY, EXIT_VALIDATION = 0, 1, 2, 3, 4
EXAMPLES = ("rigid_body_spline", "elroy_beanie")
log = logging.getLogger("algmech")


class ProblemError(ValueError):
    """Schema or consistency violation located by a JSON pointer."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"


@dataclass(frozen=True)
class ProblemFile:
    document: dict
    source: str = "<memory>"

    @property
    def mode(self) -> str:
        return self.document["mode"]

    def get(self, key: str, default=None):
        return self.document.get(key, default)


def schema() -> dict:
    text = resources.files("algmech").joinpath("data/problem.schema.json").read_text()
    return json.loads(text)


def example_path(name: str) -> Path:
    if name not in EXAMPLES:
        raise ValueError(f"unknown example {name!r}; bundled: {', '.join(EXAMPLES)}")
    return Path(str(resources.files("algmech").joinpath(f"data/examples/{name}.json")))


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def parse_document(doc: Any, source: str = "<memory>") -> ProblemFile:
    """Schema-check a decoded document and run the consistency checks."""
    validator = jsonschema.Draft202012Validator(schema())
    err = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if err is not None:
        raise ProblemError(err.message, _pointer(err.absolute_path))
    pf = ProblemFile(doc, source)
    build(pf)
    return pf


def load(path) -> ProblemFile:
    """Read, schema-validate and consistency-check a problem file."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise ProblemError(f"invalid JSON at line {err.lineno} column {err.colno}: {err.msg}") from None
    return parse_document(doc, str(path))


# --------------------------------------------------------------------------
# building library objects


def _params(pf: ProblemFile) -> dict:
    return {k: float(v) for k, v in pf.get("parameters", {}).items()}


def _expr_check(source, names, params, pointer):
    if isinstance(source, (int, float)):
        return
    try:
        parse(source, set(names) | set(params))
    except ExpressionError as err:
        raise ProblemError(str(err), pointer) from None


def _custom_entries(spec: dict, n: int, params: dict, m: int) -> dict:
    """0-based sparse entries; a mirrored (B, A) entry must be the exact negative."""
    names = [f"x{i + 1}" for i in range(m)]
    seen: dict[tuple[int, int, int], tuple[str, int]] = {}
    out: dict[tuple[int, int, int], Any] = {}
    for k, entry in enumerate(spec.get("C", [])):
        ptr = f"/algebroid/custom/C/{k}"
        a, b, c = entry["A"] - 1, entry["B"] - 1, entry["C_index"] - 1
        if max(a, b, c) >= n:
            raise ProblemError(f"index out of range for rank {n}", ptr)
        _expr_check(entry["expr"], names, params, ptr + "/expr")
        raw = entry["expr"]
        expr = parse(raw, set(names) | set(params)) if isinstance(raw, str) else as_expr(float(raw))
        if a == b:
            if not (isinstance(expr, Num) and expr.value == 0.0):
                raise ProblemError("C^C_AA must vanish (antisymmetry)", ptr)
            continue
        key = (min(a, b), max(a, b), c)
        canon = to_source(expr if a < b else neg(expr))
        if key in seen:
            if seen[key][0] != canon:
                raise ProblemError(
                    f"entry conflicts with /algebroid/custom/C/{seen[key][1]}: C^C_AB must equal -C^C_BA", ptr
                )
            continue
        seen[key] = (canon, k)
        out[(a, b, c)] = raw if isinstance(raw, str) else float(raw)
    return out


def build_chart(pf: ProblemFile) -> alg.AlgebroidChart:
    spec = pf.get("algebroid")
    params = _params(pf)
    if "builtin" in spec:
        b = spec["builtin"]
        try:
            return alg.builtin_chart(b["name"], b.get("params", {}))
        except (ValueError, TypeError) as err:
            raise ProblemError(str(err), "/algebroid/builtin") from None
    c = spec["custom"]
    m, n = c["m"], c["n"]
    rho = c.get("rho", [[0.0] * n for _ in range(m)])
    if len(rho) != m or any(len(row) != n for row in rho):
        raise ProblemError(f"rho must be an {m} x {n} matrix", "/algebroid/custom/rho")
    xnames = [f"x{i + 1}" for i in range(m)]
    for i, row in enumerate(rho):
        for a, e in enumerate(row):
            _expr_check(e, xnames, params, f"/algebroid/custom/rho/{i}/{a}")
    entries = _custom_entries(c, n, params, m)
    box = tuple(c.get("sample_box", (-1.0, 1.0)))
    return alg.make_chart(m, n, rho, entries, name="custom", params=params, sample_box=box)


def _vec(pf: ProblemFile, section: str, key: str, size: int, default=None) -> np.ndarray | None:
    sec = pf.get(section, {})
    if key not in sec:
        return None if default is None else np.full(size, float(default))
    v = np.asarray(sec[key], dtype=float)
    if v.size != size:
        raise ProblemError(f"expected {size} entries, got {v.size}", f"/{section}/{key}")
    return v


def _field(pf, key, inputs, pointer=None, source=None):
    params = _params(pf)
    src = pf.get(key) if source is None else source
    names = [f"{name}{i + 1}" for name, k in inputs for i in range(k)]
    _expr_check(src, names, params, pointer or f"/{key}")
    return ExprField.from_sources(src, inputs, (), params)


def _require(pf: ProblemFile, *keys: str):
    for key in keys:
        if key not in pf.document:
            raise ProblemError(f"mode {pf.mode!r} needs {key!r}", "")


@dataclass
class Built:
    chart: alg.AlgebroidChart
    problem: Any = None
    control: ControlProblem | None = None
    reduced: Any = None


def _actuation(pf: ProblemFile, n: int) -> tuple[int, ...]:
    act = pf.get("actuation")
    if act is None:
        return tuple(range(n))
    if len(set(act)) != len(act) or max(act) > n:
        raise ProblemError(f"actuation indices must be distinct and within 1..{n}", "/actuation")
    return tuple(a - 1 for a in act)


def _second_order_problem(pf: ProblemFile, chart) -> Built:
    m, n = chart.base_dim, chart.fiber_rank
    if "cost" in pf.document:
        _require(pf, "lagrangian")
        L = _field(pf, "lagrangian", (("x", m), ("y", n)))
        act = _actuation(pf, n)
        cost = _field(pf, "cost", (("x", m), ("y", n), ("u", len(act))))
        x0 = _vec(pf, "boundary", "x0", m)
        y0 = _vec(pf, "boundary", "y0", n)
        xT = _vec(pf, "boundary", "xT", m)
        yT = _vec(pf, "boundary", "yT", n)
        T = float(pf.get("boundary", {}).get("T", 1.0))
        cp = ControlProblem(chart, L, cost, act, x0, y0, xT, yT, T)
        if cp.fully_actuated:
            return Built(chart, build_fully_actuated(cp), cp)
        _, red = build_underactuated(cp)
        return Built(chart, red.problem, cp, red)
    _require(pf, "lagrangian")
    inputs = (("x", m), ("y", n), ("z", n))
    L = _field(pf, "lagrangian", inputs)
    cons = [
        _field(pf, None, inputs, f"/constraints/{k}", src) for k, src in enumerate(pf.get("constraints", []))
    ]
    if not cons:
        return Built(chart, SecondOrderProblem(chart, L))
    prob = SecondOrderProblem(chart, L, tuple(cons), "constrained_multipliers")
    dep = [a - 1 for a in pf.get("dependent", range(n - len(cons) + 1, n + 1))]
    try:
        return Built(chart, eliminate(prob, dep))
    except ValueError as err:
        log.info("elimination unavailable (%s); using multipliers", err)
        return Built(chart, prob)


def build(pf: ProblemFile) -> Built:
    """Construct the chart and the problem object the mode needs."""
    chart = build_chart(pf)
    m, n = chart.base_dim, chart.fiber_rank
    mode = pf.mode
    try:
        if mode == "validate":
            return Built(chart)
        if mode == "simulate-el":
            _require(pf, "lagrangian")
            return Built(chart, LagrangianProblem(chart, _field(pf, "lagrangian", (("x", m), ("y", n)))))
        if mode == "simulate-hamilton":
            _require(pf, "hamiltonian")
            return Built(chart, HamiltonianProblem(chart, _field(pf, "hamiltonian", (("x", m), ("p", n)))))
        if mode == "vakonomic":
            _require(pf, "lagrangian")
            inputs = (("x", m), ("y", n))
            L = _field(pf, "lagrangian", inputs)
            cons = [_field(pf, None, inputs, f"/constraints/{k}", s) for k, s in enumerate(pf.get("constraints", []))]
            dep = pf.get("dependent")
            try:
                prob = vakonomic_problem(chart, L, cons, None if dep is None else [a - 1 for a in dep])
            except ValueError as err:
                raise ProblemError(str(err), "/constraints") from None
            return Built(chart, prob)
        if mode == "solve-ocp":
            _require(pf, "cost", "lagrangian", "boundary")
        return _second_order_problem(pf, chart)
    except ProblemError:
        raise
    except RegularityError:
        raise
    except ValueError as err:
        raise ProblemError(str(err), "") from None


# --------------------------------------------------------------------------
# running modes


def _solver(pf: ProblemFile) -> dict:
    s = {"method": "rk4", "h": 1e-3, "rtol": 1e-8, "atol": 1e-10, "newton_tol": 1e-10, "max_iter": 20, "segments": 1}
    s.update(pf.get("solver", {}))
    return s


def _horizon(pf: ProblemFile) -> float:
    return float(pf.get("boundary", {}).get("T", 1.0))


def _integrate(pf, f, s0, monitors=None, labels=()):
    s = _solver(pf)
    return integrate(f, s0, _horizon(pf), s["method"], s["h"], s["rtol"], s["atol"], monitors, labels)


def _names(prefix: str, k: int) -> list[str]:
    return [f"{prefix}{i + 1}" for i in range(k)]


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if np.isfinite(f) else str(f)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _validation(pf: ProblemFile, chart, tol: float | None, seed: int) -> dict:
    v = pf.get("validation", {})
    count = int(v.get("samples", 100))
    tol = float(tol if tol is not None else v.get("tol", 1e-10))
    samples = alg.default_samples(chart, count, seed)
    rep = alg.validate_chart(chart, samples, tol)
    out = rep.to_dict()
    out["check"] = "antisymmetry, anchor compatibility and Jacobi identity at sampled base points"
    return out


def _pontryagin_start(pf: ProblemFile, prob: SecondOrderProblem) -> PontryaginState:
    m, n = prob.chart.base_dim, prob.chart.fiber_rank
    k = len(prob.free) if prob.elimination is not None else n
    x0 = _vec(pf, "boundary", "x0", m, 0.0)
    y0 = _vec(pf, "boundary", "y0", n, 0.0)
    z0 = _vec(pf, "boundary", "z0", k)
    if z0 is None:
        z0 = _vec(pf, "initial", "z0", k, 0.0)
    p0 = _vec(pf, "initial", "p0", n, 0.0)
    pbar = _vec(pf, "initial", "pbar0", n, 0.0)
    lam = _vec(pf, "initial", "lam0", prob.w_dim - k, 0.0)
    s = PontryaginState(x0, y0, z0, p0, pbar, lam)
    return s if prob.uses_multipliers else project_to_w1(prob, s)


def _pontryagin_csv(built: Built, traj) -> str:
    prob = built.problem
    m, n = prob.chart.base_dim, prob.chart.fiber_rank
    header = ["t", *_names("x", m), *_names("y", n), *_names("z", n)]
    r = prob.w_dim - (len(prob.free) if prob.elimination is not None else n)
    header += [*_names("lam", r), *_names("p", n), *_names("pbar", n), "H"]
    rows = []
    ncons = None
    for t, v in zip(traj.t, traj.states):
        s = PontryaginState.from_flat(prob, v)
        z = full_acceleration(built.reduced, s.x, s.y, s.z) if built.reduced is not None else s.z
        if prob.elimination is not None and built.reduced is None:
            z = np.zeros(n)
            z[list(prob.free)] = s.z
            z[list(prob.dependent)] = prob.elimination.psi(s.x, s.y, s.z)
        c = constraint_residual(prob, s)
        ncons = c.size
        rows.append([t, *s.x, *s.y, *z, *s.lam, *s.p, *s.pbar, pontryagin_hamiltonian(prob, s), *c])
    header += _names("c", ncons or 0)
    return _csv_text(header, rows)


def _csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(f"{float(v):.17g}" for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _regularity_or_raise(prob, s) -> dict:
    reg = regularity_test(prob, s)
    out = reg.to_dict()
    out["check"] = "regularity matrix nondegenerate at the initial state"
    if not reg.regular:
        raise RegularityError(f"sorusk: regularity matrix ({reg.form}) is singular at the initial state", reg.matrix)
    return out


def _spline_residual(prob: SecondOrderProblem, traj, T: float) -> float:
    m, n = prob.chart.base_dim, prob.chart.fiber_rank
    zc = [m + n + a for a in range(n)]
    worst = 0.0
    for t in np.linspace(0.05 * T, 0.95 * T, 19):
        v = traj(t)
        s = PontryaginState.from_flat(prob, v)
        zd = [finite_difference_jet(traj, c, 1, t) for c in zc]
        zdd = [finite_difference_jet(traj, c, 2, t) for c in zc]
        r = second_order_el_residual(prob, SecondOrderJet(s.x, s.y, s.z, zd, zdd))
        worst = max(worst, float(np.abs(r).max()))
    return worst


def _run_second_order(pf: ProblemFile, built: Built) -> tuple[dict, str]:
    prob = built.problem
    s0 = _pontryagin_start(pf, prob)
    report = {"problem_mode": prob.mode, "regularity": _regularity_or_raise(prob, s0)}
    if not prob.uses_multipliers:
        report["constraint_chain"] = run_constraint_algorithm(prob, s0).to_dict()
    f = optimality_vector_field(prob)
    traj = _integrate(pf, f, s0.flat())
    h = np.array([pontryagin_hamiltonian(prob, PontryaginState.from_flat(prob, v)) for v in traj.states])
    c = np.array([np.abs(constraint_residual(prob, PontryaginState.from_flat(prob, v))).max(initial=0.0)
                  for v in traj.states])
    report["hamiltonian_drift"] = float(np.abs(h - h[0]).max())
    report["constraint_residual_max"] = float(c.max())
    report["final_state"] = traj.states[-1]
    return report, _pontryagin_csv(built, traj)


def _shooting_setup(pf: ProblemFile, prob: SecondOrderProblem):
    m, n = prob.chart.base_dim, prob.chart.fiber_rank
    if prob.uses_multipliers:
        raise ProblemError("boundary-value solving needs an eliminated or unconstrained problem", "/constraints")
    k = len(prob.free) if prob.elimination is not None else n
    dep = list(prob.dependent)
    x0 = _vec(pf, "boundary", "x0", m, 0.0)
    y0 = _vec(pf, "boundary", "y0", n)
    if y0 is None:
        raise ProblemError("solve-ocp needs y0", "/boundary")
    z0 = _vec(pf, "boundary", "z0", k)
    targets = [(key, _vec(pf, "boundary", key, size)) for key, size in (("xT", m), ("yT", n), ("zT", k))]
    targets = [(key, v) for key, v in targets if v is not None]
    guess_z = _vec(pf, "initial", "z0", k, 0.0)
    guess_p = _vec(pf, "initial", "p0", n, 0.0)
    guess_pb = _vec(pf, "initial", "pbar0", n, 0.0)[dep]
    parts = ([] if z0 is not None else [("z0", guess_z)]) + [("p0", guess_p), ("pbar0", guess_pb)]
    parts = [(key, v) for key, v in parts if v.size]
    n_unknowns = sum(v.size for _, v in parts)
    n_res = sum(v.size for _, v in targets)
    if n_unknowns != n_res:
        raise ProblemError(
            f"boundary-value system is not square: {n_unknowns} unknowns ({', '.join(k for k, _ in parts)}) "
            f"against {n_res} terminal conditions ({', '.join(k for k, _ in targets) or 'none'})",
            "/boundary",
        )

    def initial_state(u):
        vals, pos = {}, 0
        for key, v in parts:
            vals[key] = u[pos : pos + v.size]
            pos += v.size
        pbar = np.zeros(n)
        if dep:
            pbar[dep] = vals["pbar0"]
        z = z0 if z0 is not None else vals["z0"]
        s = PontryaginState(x0, y0, z, vals["p0"], pbar)
        return project_to_w1(prob, s).flat()

    slices = {"xT": slice(0, m), "yT": slice(m, m + n), "zT": slice(m + n, m + n + k)}

    def residual(s0, sT):
        return np.concatenate([sT[slices[key]] - v for key, v in targets])

    guess = np.concatenate([v for _, v in parts])
    return initial_state, residual, guess, n_unknowns


def _run_ocp(pf: ProblemFile, built: Built, tol: float | None) -> tuple[dict, str, int]:
    prob = built.problem
    cfg = _solver(pf)
    initial_state, residual, guess, k = _shooting_setup(pf, prob)
    s_guess = PontryaginState.from_flat(prob, initial_state(guess))
    report = {"problem_mode": prob.mode, "regularity": _regularity_or_raise(prob, s_guess)}
    sp = ShootingProblem(
        optimality_vector_field(prob), _horizon(pf), initial_state, residual, k,
        cfg["segments"], cfg["method"], cfg["h"],
    )
    newton_tol = float(tol if tol is not None else cfg["newton_tol"])
    try:
        res, traj = shoot(sp, guess, newton_tol, cfg["max_iter"])
    except NonConvergenceError as err:
        report["shooting"] = err.result.to_dict() if err.result else {}
        report["error"] = f"solve: {err}"
        return report, "", EXIT_NONCONVERGED
    report["shooting"] = res.to_dict()
    h = np.array([pontryagin_hamiltonian(prob, PontryaginState.from_flat(prob, v)) for v in traj.states])
    report["hamiltonian_drift"] = float(np.abs(h - h[0]).max())
    if prob.mode == "unconstrained":
        report["spline_residual_max"] = _spline_residual(prob, traj, _horizon(pf))
        report["spline_residual_check"] = "second-order Euler-Lagrange residual along the solution, t in [0.05T, 0.95T]"
    code = EXIT_OK if res.converged else EXIT_NONCONVERGED
    if not res.converged:
        report["error"] = f"solve: shooting stopped at residual {res.residual_norm:.3e} after {res.iterations} iterations"
    return report, _pontryagin_csv(built, traj), code


def _run_first_order(pf: ProblemFile, built: Built) -> tuple[dict, str]:
    chart, prob = built.chart, built.problem
    m, n = chart.base_dim, chart.fiber_rank
    x0 = _vec(pf, "boundary", "x0", m, 0.0)
    if pf.mode == "simulate-el":
        y0 = _vec(pf, "boundary", "y0", n, 0.0)
        mon = {"E": lambda t, s: energy(prob, AlgebroidState(s[:m], s[m:]))}
        traj = _integrate(pf, el_vector_field(prob), np.concatenate([x0, y0]), mon, _names("x", m) + _names("y", n))
        key = "E"
    else:
        p0 = _vec(pf, "initial", "p0", n, 0.0)
        mon = {"H": lambda t, s: float(prob.H(s[:m], s[m:]))}
        traj = _integrate(pf, hamilton_vector_field(prob), np.concatenate([x0, p0]), mon, _names("x", m) + _names("p", n))
        key = "H"
    vals = traj.monitors[key]
    report = {f"{key}_drift": float(np.abs(vals - vals[0]).max()), "final_state": traj.states[-1]}
    return report, traj.to_csv()


def _run_vakonomic(pf: ProblemFile, built: Built) -> tuple[dict, str]:
    prob = built.problem
    m, n = prob.chart.base_dim, prob.chart.fiber_rank
    free, dep = list(prob.free), list(prob.dependent)
    x0 = _vec(pf, "boundary", "x0", m, 0.0)
    y0 = _vec(pf, "boundary", "y0", n, 0.0)
    pd = _vec(pf, "initial", "p0", len(dep), 0.0)
    yf = y0[free]
    p = vakonomic_momenta(prob, x0, yf, pd)
    s = PontryaginState(x0, y0, np.zeros(0), p, np.zeros(0))
    reg = regularity_test(prob, s)
    report = {"regularity": reg.to_dict()}
    if not reg.regular:
        raise RegularityError("sorusk: vakonomic regularity matrix is singular at the initial state", reg.matrix)
    labels = _names("x", m) + [f"y{a + 1}" for a in free] + _names("p", n)
    traj = _integrate(pf, vakonomic_vector_field(prob), np.concatenate([x0, yf, p]), labels=labels)
    report["final_state"] = traj.states[-1]
    return report, traj.to_csv()


def execute(pf: ProblemFile, tol: float | None = None, seed: int = 0) -> tuple[int, dict, str | None]:
    """Run a problem file; returns (exit code, report, csv text or None)."""
    report: dict = {"mode": pf.mode}
    csv_text = None
    try:
        built = build(pf)
        chart = built.chart
        report["algebroid"] = {"name": chart.chart_name, "m": chart.base_dim, "n": chart.fiber_rank}
        val = _validation(pf, chart, tol if pf.mode == "validate" else None, seed)
        report["validation"] = val
        if not val["passed"]:
            report["error"] = "algebroid: structure equations fail at a sampled point"
            return EXIT_VALIDATION, report, None
        code = EXIT_OK
        if pf.mode in ("simulate-el", "simulate-hamilton"):
            extra, csv_text = _run_first_order(pf, built)
        elif pf.mode == "vakonomic":
            extra, csv_text = _run_vakonomic(pf, built)
        elif pf.mode == "second-order":
            extra, csv_text = _run_second_order(pf, built)
        elif pf.mode == "constraint-chain":
            prob = built.problem
            s0 = _pontryagin_start(pf, prob)
            extra = {"regularity": regularity_test(prob, s0).to_dict()}
            if not prob.uses_multipliers:
                extra["constraint_chain"] = run_constraint_algorithm(prob, s0).to_dict()
        elif pf.mode == "solve-ocp":
            extra, csv_text, code = _run_ocp(pf, built, tol)
        else:
            extra = {}
        report.update(extra)
        return code, report, csv_text
    except ProblemError as err:
        report["error"] = f"cli: {err}"
        report["pointer"] = err.pointer
        return EXIT_VALIDATION, report, None
    except RegularityError as err:
        report["error"] = str(err) if str(err).startswith("sorusk") else f"sorusk: {err}"
        if err.matrix is not None:
            report["singular_matrix"] = {"shape": list(err.matrix.shape), "rows": err.matrix.tolist()}
        return EXIT_REGULARITY, report, None
    except NonConvergenceError as err:
        report["error"] = f"solve: {err}"
        return EXIT_NONCONVERGED, report, None


def write_outputs(out_dir, report: dict, csv_text: str | None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
    if csv_text is not None:
        (out / "trajectory.csv").write_text(csv_text)


def run(pf: ProblemFile, out_dir, tol: float | None = None, seed: int = 0) -> int:
    code, report, csv_text = execute(pf, tol, seed)
    report["exit_code"] = code
    write_outputs(out_dir, report, csv_text)
    if code:
        log.error("%s", report.get("error", f"exit code {code}"))
    return code


def _apply_point(doc: dict, point: dict) -> dict:
    doc = copy.deepcopy(doc)
    doc.pop("sweep", None)
    params = doc.setdefault("parameters", {})
    builtin = doc.get("algebroid", {}).get("builtin")
    for key, value in point.items():
        if builtin is not None and key in builtin.get("params", {}):
            builtin["params"][key] = value
        else:
            params[key] = value
    return doc


def sweep(pf: ProblemFile, out_dir, tol: float | None = None, seed: int = 0, workers: int | None = None) -> int:
    """Run every point of the parameter grid in its own directory."""
    grid = pf.get("sweep") or {}
    if not grid:
        raise ProblemError("sweep needs a non-empty 'sweep' section", "/sweep")
    keys = sorted(grid)
    points = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    out = Path(out_dir)

    def one(idx_point):
        idx, point = idx_point
        sub = out / f"point_{idx:03d}"
        try:
            child = parse_document(_apply_point(pf.document, point), pf.source)
        except ProblemError as err:
            write_outputs(sub, {"error": f"cli: {err}", "pointer": err.pointer, "exit_code": EXIT_VALIDATION}, None)
            return EXIT_VALIDATION
        return run(child, sub, tol, seed)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        codes = list(pool.map(one, enumerate(points)))
    summary = [{"point": p, "dir": f"point_{i:03d}", "exit_code": c} for i, (p, c) in enumerate(zip(points, codes))]
    write_outputs(out, {"points": summary}, None)
    return max(codes)


# --------------------------------------------------------------------------
# entry point


def _configure_logging():
    level = os.environ.get("ALGMECH_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="algmech", description="Mechanics and optimal control on Lie algebroids.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("validate", "check a problem file and its structure data"),
        ("run", "run the problem file's mode"),
        ("sweep", "run a parameter grid concurrently"),
    ):
        p = sub.add_parser(name, help=helptext)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--input", help="problem file (JSON)")
        src.add_argument("--example", choices=EXAMPLES, help="bundled example problem")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--tol", type=float, default=None, help="validation / Newton tolerance override")
        p.add_argument("--seed", type=int, default=0, help="seed for sampled checks")
    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    path = args.input if args.input else example_path(args.example)
    try:
        pf = load(path)
    except OSError as err:
        log.error("cli: cannot read %s: %s", path, err)
        return EXIT_IO
    except ProblemError as err:
        log.error("cli: %s", err)
        write_outputs(args.out, {"error": f"cli: {err}", "pointer": err.pointer, "exit_code": EXIT_VALIDATION}, None)
        return EXIT_VALIDATION
    except RegularityError as err:
        log.error("%s", err)
        return EXIT_REGULARITY
    if args.command == "validate":
        built = build(pf)
        report = {"mode": pf.mode, "validation": _validation(pf, built.chart, args.tol, args.seed)}
        code = EXIT_OK if report["validation"]["passed"] else EXIT_VALIDATION
        report["exit_code"] = code
        write_outputs(args.out, report, None)
        return code
    if args.command == "sweep":
        try:
            return sweep(pf, args.out, args.tol, args.seed)
        except ProblemError as err:
            log.error("cli: %s", err)
            return EXIT_VALIDATION
    return run(pf, args.out, args.tol, args.seed)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
