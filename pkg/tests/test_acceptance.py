"""Acceptance criteria; each test records one PASS/FAIL line."""
from __future__ import annotations

import itertools
import math
import time

import numpy as np

import oracles as O
from algmech import (
    AlgebroidChart,
    LagrangianProblem,
    PontryaginState,
    SecondOrderJet,
    SecondOrderProblem,
    SecondOrderState,
    ShootingProblem,
    action_algebroid,
    atiyah_trivial,
    build_fully_actuated,
    build_underactuated,
    builtin_chart,
    control_problem,
    el_residual,
    elroy_beanie,
    finite_difference_jet,
    integrate,
    lagrangian_field,
    lie_algebra,
    optimality_vector_field,
    oracle_action_gradient,
    pontryagin_hamiltonian,
    project_to_w1,
    regularity_test,
    run_constraint_algorithm,
    second_order_el_residual,
    second_order_lagrangian,
    shoot,
    so3_constants,
    tangent_bundle,
    validate_chart,
)
from algmech import cli
from algmech.calculus import constant_field
from algmech.solve import admissible_path

RIGID_L = "0.5*(y1^2 + y2^2 + y3^2)"
RIGID_COST = "0.5*(u1^2 + u2^2 + u3^2)"


def _rigid_body():
    return build_fully_actuated(control_problem(builtin_chart("so3"), RIGID_L, RIGID_COST))


def _elroy(a: float, i1: float = 1.0, i2: float = 2.0):
    cp = control_problem(
        elroy_beanie(i1, i2), "0.5*(y1^2 + y2^2 + y3^2 + y4^2) - a*(1 - cos(x1))", "0.5*u1^2", [0], {"a": a}
    )
    return build_underactuated(cp)[1]


def _builtin_charts() -> list[AlgebroidChart]:
    return [
        tangent_bundle(1),
        tangent_bundle(2),
        builtin_chart("so3"),
        builtin_chart("se2"),
        lie_algebra(so3_constants()),
        elroy_beanie(1.0, 1.0),
        elroy_beanie(1.0, 2.0),
        action_algebroid(2, so3_constants()[:1, :1, :1] * 0, [["-x2"], ["x1"]]),
        atiyah_trivial(2, so3_constants(), [["x2", "0", "x1*x2"], ["0", "sin(x1)", "1"]]),
    ]


def test_acceptance_1_structure_validation(acceptance):
    start = time.perf_counter()
    worst = 0.0
    for k, chart in enumerate(_builtin_charts()):
        samples = np.random.default_rng(k).uniform(-1, 1, size=(100, chart.base_dim))
        worst = max(worst, validate_chart(chart, samples, tol=1e-10).max_residual)
    weakest = math.inf
    empty = constant_field(np.zeros((0, 3)), (("x", 0),))
    for idx in itertools.product(range(3), repeat=3):
        c = so3_constants()
        c[idx] += 1e-3
        perturbed = AlgebroidChart(0, 3, empty, constant_field(c, (("x", 0),)))
        rep = validate_chart(perturbed, np.zeros((1, 0)), tol=1e-10)
        weakest = min(weakest, rep.jacobi_residual) if not rep.passed else -1.0
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and weakest >= 5e-4 and elapsed < 1.0
    acceptance(1, "structure validation", ok, f"max residual {worst:.1e}, weakest detection {weakest:.1e}, {elapsed:.2f} s")
    assert ok


def test_acceptance_2_classical_reduction(acceptance):
    start = time.perf_counter()
    chart = tangent_bundle(2)
    rng = np.random.default_rng(2)
    first = LagrangianProblem(chart, lagrangian_field(chart, O.TB2_LAGRANGIAN))
    err1 = 0.0
    for _ in range(100):
        q, v, a = rng.uniform(-2, 2, size=(3, 2))
        err1 = max(err1, np.abs(el_residual(first, SecondOrderState(q, v, a)) - O.tb2_classical_el(q, v, a)).max())
    second = SecondOrderProblem(chart, second_order_lagrangian(chart, O.TB2_SECOND_ORDER))
    err2 = 0.0
    for _ in range(100):
        jet = rng.uniform(-2, 2, size=(5, 2))
        got = second_order_el_residual(second, SecondOrderJet(*jet))
        err2 = max(err2, np.abs(got - O.tb2_second_order_el(*jet)).max())
    elapsed = time.perf_counter() - start
    ok = err1 < 1e-12 and err2 < 1e-10 and elapsed < 1.0
    acceptance(2, "classical reduction", ok, f"first order {err1:.1e}, second order {err2:.1e}, {elapsed:.2f} s")
    assert ok


def test_acceptance_3_euler_poincare_reduction(acceptance):
    chart = builtin_chart("so3")
    rng = np.random.default_rng(3)
    inertia = (1.0, 2.5, 0.7)
    prob = SecondOrderProblem(chart, second_order_lagrangian(chart, O.so3_second_order_source(inertia)))
    err = 0.0
    for _ in range(100):
        jet = rng.uniform(-2, 2, size=(4, 3))
        got = second_order_el_residual(prob, SecondOrderJet(np.zeros(0), *jet))
        err = max(err, np.abs(got - O.so3_second_order_ep(inertia, *jet)).max())
    ok = err < 1e-10
    acceptance(3, "Euler-Poincare reduction", ok, f"max deviation {err:.1e}")
    assert ok


def test_acceptance_4_rigid_body_splines(acceptance):
    start = time.perf_counter()
    prob = _rigid_body()
    f = optimality_vector_field(prob)
    rng = np.random.default_rng(4)

    def hamiltonian(t, s):
        return pontryagin_hamiltonian(prob, PontryaginState.from_flat(prob, s))

    worst_res = worst_drift = 0.0
    ts = np.linspace(0.05, 0.95, 91)
    for _ in range(10):
        y, z, p = rng.uniform(-1, 1, size=(3, 3))
        s0 = project_to_w1(prob, PontryaginState(np.zeros(0), y, z, p, np.zeros(3))).flat()
        traj = integrate(f, s0, 1.0, "rk4", h=1e-3, monitors={"H": hamiltonian})
        worst_drift = max(worst_drift, np.abs(traj.monitors["H"] - traj.monitors["H"][0]).max())
        for t in ts:
            omega = traj(t)[0:3]
            acc = np.array([finite_difference_jet(traj, 3 + a, 1, t) for a in range(3)])
            jerk = np.array([finite_difference_jet(traj, 3 + a, 2, t) for a in range(3)])
            worst_res = max(worst_res, np.abs(jerk + np.cross(omega, acc)).max())
    elapsed = time.perf_counter() - start
    ok = worst_res < 1e-5 and worst_drift < 1e-8 and elapsed < 10.0
    acceptance(4, "rigid-body cubic splines", ok,
               f"spline residual {worst_res:.1e}, H drift {worst_drift:.1e}, {elapsed:.2f} s")
    assert ok


def test_acceptance_5_constraint_algorithm(acceptance):
    start = time.perf_counter()
    prob = _rigid_body()
    rng = np.random.default_rng(5)
    y, z, p, pbar = rng.uniform(-1, 1, size=(4, 3))
    s = PontryaginState(np.zeros(0), y, z, p, pbar)
    report = run_constraint_algorithm(prob, s)
    level0 = report.levels[0]
    match = np.abs(np.array(level0.constraint_values) - (pbar - z)).max()
    abelian = lie_algebra(np.zeros((2, 2, 2)))
    degenerate = SecondOrderProblem(abelian, second_order_lagrangian(abelian, "0.5*z2^2"))
    s2 = PontryaginState(np.zeros(0), [0.3, -0.2], [0.1, 0.4], [0.5, 0.2], [0.0, 0.4])
    deep = run_constraint_algorithm(degenerate, s2)
    elapsed = time.perf_counter() - start
    ok = (
        level0.kernel_dim == 3
        and match < 1e-14
        and report.stabilized
        and report.nontrivial_levels == 1
        and deep.nontrivial_levels >= 2
        and elapsed < 1.0
    )
    acceptance(5, "constraint algorithm", ok,
               f"kernel {level0.kernel_dim}, constraint match {match:.1e}, rigid levels {report.nontrivial_levels}, "
               f"degenerate levels {deep.nontrivial_levels}, {elapsed:.2f} s")
    assert ok


def test_acceptance_6_regularity(acceptance):
    rng = np.random.default_rng(6)
    rigid = _rigid_body()
    y, z, p, pbar = rng.uniform(-1, 1, size=(4, 3))
    r1 = regularity_test(rigid, PontryaginState(np.zeros(0), y, z, p, pbar))
    red = _elroy(0.5)
    r2 = regularity_test(red.problem, PontryaginState([0.3], rng.uniform(-1, 1, 4), [0.2], rng.uniform(-1, 1, 4),
                                                      rng.uniform(-1, 1, 4)))
    chart = tangent_bundle(2)
    linear = SecondOrderProblem(chart, second_order_lagrangian(chart, "y1*z1 + x2*z2 + 0.5*y2^2"))
    r3 = regularity_test(linear, PontryaginState([0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0, 0], [0, 0]))
    ok = (
        np.array_equal(r1.matrix, np.eye(3)) and r1.regular
        and r2.matrix.shape == (1, 1) and r2.regular and abs(r2.matrix[0, 0] - 1.0) < 1e-14
        and not r3.regular
    )
    acceptance(6, "regularity propositions", ok,
               f"rigid identity {np.array_equal(r1.matrix, np.eye(3))}, elroy {r2.matrix.tolist()}, "
               f"linear regular {r3.regular}")
    assert ok


def test_acceptance_7_elroy_beanie(acceptance):
    a, i1, i2 = 0.5, 1.0, 2.0
    red = _elroy(a, i1, i2)
    f = optimality_vector_field(red.problem)
    rng = np.random.default_rng(7)
    dv, ddv = (lambda x: a * math.sin(x)), (lambda x: a * math.cos(x))
    worst = 0.0
    for _ in range(100):
        s = rng.uniform(-1, 1, size=14)
        s = project_to_w1(red.problem, PontryaginState.from_flat(red.problem, s)).flat()
        assert abs(O.elroy_constraint(s, i1, i2, dv)) < 1e-14
        worst = max(worst, np.abs(f(0.0, s) - O.elroy_field(s, i1, i2, dv, ddv)).max())
    free = _elroy(0.0, i1, i2)
    g = optimality_vector_field(free.problem)
    drift = 0.0
    for _ in range(3):
        s = rng.uniform(-1, 1, size=14)
        s0 = project_to_w1(free.problem, PontryaginState.from_flat(free.problem, s)).flat()
        traj = integrate(g, s0, 1.0, "rk4", h=1e-3)
        drift = max(drift, np.abs(traj.states[:, 4] - s0[4]).max())
    ok = worst < 1e-12 and drift < 1e-10
    acceptance(7, "Elroy beanie optimality system", ok, f"max deviation {worst:.1e}, v4 drift {drift:.1e}")
    assert ok


def test_acceptance_8_bvp_spline(acceptance):
    start = time.perf_counter()
    chart = tangent_bundle(1)
    prob = SecondOrderProblem(chart, second_order_lagrangian(chart, "0.5*z1^2"))

    def initial(u):
        return np.array([0.0, 0.0, u[0], u[1], u[0]])

    def residual(s0, sT):
        return sT[:2] - np.array([1.0, 0.0])

    sp = ShootingProblem(optimality_vector_field(prob), 1.0, initial, residual, 2)
    result, traj = shoot(sp, np.zeros(2))
    t = np.linspace(0, 1, 201)
    err = np.abs(traj(t)[:, 0] - (3 * t**2 - 2 * t**3)).max()
    elapsed = time.perf_counter() - start
    ok = result.converged and result.iterations <= 10 and err < 1e-6 and elapsed < 5.0
    acceptance(8, "BVP spline", ok, f"{result.iterations} iterations, max error {err:.1e}, {elapsed:.2f} s")
    assert ok


def _random_problem(k: int, rng) -> LagrangianProblem:
    kind = k % 5
    if kind == 0:
        chart = tangent_bundle(int(rng.integers(1, 3)))
    elif kind == 1:
        chart = builtin_chart("so3")
    elif kind == 2:
        chart = builtin_chart("se2")
    elif kind == 3:
        affine = np.zeros((2, 2, 2))
        affine[0, 1, 1], affine[1, 0, 1] = 1.0, -1.0
        chart = atiyah_trivial(1, affine, [[f"{rng.uniform(-1, 1):.3f}*x1", "0.5"]])
    else:
        chart = action_algebroid(2, np.zeros((1, 1, 1)), [["-x2"], ["x1"]])
    m, n = chart.base_dim, chart.fiber_rank
    a = rng.uniform(-0.3, 0.3, size=(n, n))
    mass = np.eye(n) + a @ a.T
    terms = [f"{float(0.5 * mass[i, j])!r}*y{i + 1}*y{j + 1}" for i in range(n) for j in range(n)]
    terms += [f"{float(rng.uniform(-0.5, 0.5))!r}*x{i + 1}*y{b + 1}" for i in range(m) for b in range(n)]
    terms += [f"{-float(rng.uniform(0.1, 1.0))!r}*x{i + 1}^2" for i in range(m)]
    if m:
        terms.append(f"{float(rng.uniform(-0.5, 0.5))!r}*cos(x1)*y1^2")
    if n >= 2:
        terms.append(f"{float(rng.uniform(-0.2, 0.2))!r}*y1^2*y2")
    return LagrangianProblem(chart, lagrangian_field(chart, " + ".join(terms)))


def test_acceptance_9_action_gradient_oracle(acceptance):
    rng = np.random.default_rng(9)
    worst = 1.0
    N = 400
    for k in range(20):
        prob = _random_problem(k, rng)
        m, n = prob.chart.base_dim, prob.chart.fiber_rank
        amp = rng.uniform(-1, 1, size=(3, n))
        freq = rng.uniform(0.5, 3.0, size=(3, n))
        phase = rng.uniform(0, 2 * np.pi, size=(3, n))

        def y_of(t):
            return (amp * np.sin(freq * t + phase)).sum(axis=0)

        def z_of(t):
            return (amp * freq * np.cos(freq * t + phase)).sum(axis=0)

        path = admissible_path(prob.chart, y_of, z_of, rng.uniform(-0.5, 0.5, m), 1.0, N)
        grad = oracle_action_gradient(prob, path)
        res = np.array([el_residual(prob, SecondOrderState(path.x[j], path.y[j], path.z[j])) for j in range(2, N - 2)])
        worst = min(worst, O.cosine(res, -grad))
    ok = worst > 0.99
    acceptance(9, "action-gradient oracle", ok, f"worst cosine similarity {worst:.12f} over 20 problems")
    assert ok


def test_acceptance_10_determinism(acceptance, tmp_path):
    same = True
    for name in cli.EXAMPLES:
        pf = cli.load(cli.example_path(name))
        outputs = []
        for rep in range(2):
            out = tmp_path / f"{name}_{rep}"
            assert cli.run(pf, out, seed=0) == cli.EXIT_OK
            outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        same = same and outputs[0] == outputs[1] and "trajectory.csv" in outputs[0]
    acceptance(10, "determinism", same, f"{len(cli.EXAMPLES)} bundled examples run twice")
    assert same
