"""Mechanics and second-order optimal control on Lie algebroids in local coordinates."""
from __future__ import annotations

from .algebroid import (
    AlgebroidChart,
    AlgebroidState,
    SecondOrderState,
    ValidationReport,
    action_algebroid,
    admissibility_residual,
    atiyah_trivial,
    builtin_chart,
    elroy_beanie,
    lie_algebra,
    make_chart,
    so3_constants,
    se2_constants,
    tangent_bundle,
    validate_chart,
)
from .calculus import (
    CallableField,
    EvaluationError,
    ExprField,
    ExpressionError,
    ParseError,
    SmoothField,
    UnknownIdentifierError,
    evaluate_with_derivatives,
    parse,
    to_source,
)
from .errors import NonConvergenceError, RegularityError
from .mechanics import (
    ForceSection,
    HamiltonianProblem,
    LagrangianProblem,
    controlled_el_residual,
    el_residual,
    el_vector_field,
    energy,
    hamilton_field,
    hamilton_vector_field,
    hamiltonian_field,
    lagrangian_field,
)
from .ocp import (
    ControlProblem,
    ReducedUnderactuatedProblem,
    build_fully_actuated,
    build_underactuated,
    control_problem,
    underactuated_optimality_field,
)
from .solve import (
    ShootingProblem,
    ShootingResult,
    Trajectory,
    finite_difference_jet,
    integrate,
    oracle_action_gradient,
    shoot,
)
from .sorusk import (
    ConstraintChainReport,
    PontryaginState,
    SecondOrderJet,
    SecondOrderProblem,
    constraint_residual,
    constraint_step,
    optimality_field,
    optimality_vector_field,
    pontryagin_hamiltonian,
    presymplectic_matrix,
    project_to_w1,
    regularity_test,
    run_constraint_algorithm,
    second_order_el_residual,
    second_order_lagrangian,
    vakonomic_field,
    vakonomic_problem,
    vakonomic_vector_field,
)

__all__ = sorted(
    name
    for name, obj in globals().items()
    if not name.startswith("_") and getattr(obj, "__module__", "").startswith("algmech.")
)
__version__ = "0.1.0"
