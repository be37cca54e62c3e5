"""smoothfit: grid laboratory for degenerate stationary control equations.

Solves drift-control, optimal-stopping and impulse-control equations with
monotone finite differences, verifies directional regularity of the solved
fields along the diffusion span, and synthesizes feedback policies checked by
Monte Carlo simulation.
"""

__version__ = "0.1.0"

from .lattice import (  # noqa: F401
    Grid,
    GridFunction,
    Stencil,
    StencilKind,
    build_grid,
    interpolate,
    one_sided_directional_derivative,
)
from .problems import (  # noqa: F401
    BenchmarkOracle,
    CatalogEntry,
    Coefficients,
    ControlSet,
    ProblemClass,
    ProblemSpec,
    catalog,
    catalog_entry,
    eval_H,
    eval_L,
    load_problem_config,
)
from .solver import (  # noqa: F401
    DiscreteGenerator,
    SolveReport,
    discretize,
    intervention_operator,
    policy_iteration,
    solve_impulse_qvi,
    solve_obstacle,
    supersolution_residual,
)
from .regularity import (  # noqa: F401
    KinkWitness,
    RangeBasis,
    check_value_bounds,
    directional_smoothness,
    gradient_continuity,
    kink_witness,
    projected_gradient,
    range_basis,
    semiconvexity_constant,
    smooth_fit_check,
)
from .synthesis import (  # noqa: F401
    FeedbackPolicy,
    SimulationEstimate,
    feedback_map,
    freeze_and_resolve,
    simulate,
    structure_check,
    verification_gap,
)
