"""Finite elements for total-variation regularized minimization.

Simplicial meshes with red-green-blue local refinement and grading, P1 and
Crouzeix-Raviart discretizations of the regularized model, a semi-implicit
gradient flow solver, a primal-dual gap error estimator with adaptive
refinement, and the experiment drivers behind the `rof` command line tool.
"""

__version__ = "0.1.0"

from .mesh import (  # noqa: F401
    Circle,
    Mesh,
    MeshStats,
    Segment,
    beta_graded_interval,
    grade_towards_set,
    grading_strength,
    make_graded_interval_mesh,
    make_interval_mesh,
    make_square_mesh,
    mesh_stats,
    read_mesh,
    red_refine,
    rgb_close,
    write_mesh,
)
from .fem import (  # noqa: F401
    CR,
    P0,
    P0VEC,
    P1,
    RT0CELL,
    FeFunction,
    QuadratureRule,
    assemble_mass,
    assemble_weighted_stiffness,
    cr_interpolate,
    elementwise_gradient,
    l2_error,
    nodal_interpolate,
    project_p0,
    quad_rule,
)
from .rof import (  # noqa: F401
    DataFunction,
    ExactSolution,
    RofProblem,
    coefficient,
    dual_energy,
    energies,
    exact_sign_1d,
    exact_single_disc,
    exact_two_disc,
    holder_quotient,
)
from .solver import FlowConfig, FlowState, flow_step, run_flow, solve_spd  # noqa: F401
from .estimator import (  # noqa: F401
    AdaptiveLoopConfig,
    DualField,
    EstimatorBreakdown,
    adaptive_loop,
    estimate_total,
    eta_cells,
    gamma_bounds,
    mark_cells,
    reconstruct_dual,
    scale_dual,
)
from .experiments import (  # noqa: F401
    ExperimentSpec,
    RunRecord,
    default_spec,
    emit_csv,
    eoc,
    final_eoc,
    parse_config,
    run_all_defaults,
    run_experiment,
)
