"""Reflector synthesis for a point source under the inverse-square law.

Near-field reflectors are envelopes of supporting ellipsoids sharing a
focus at the source; far-field reflectors are envelopes of paraboloids.
The solver matches a prescribed discrete or planar target measure, with
all excess flux concentrated at one designated overshoot atom, and the
validation layer re-derives the delivered measures independently by Monte
Carlo ray tracing and finite-difference transport checks.
"""

from . import cli, envelope, geometry, solver, sphere, validate
from .envelope import (
    FocalVector,
    MeasureVector,
    Reflector,
    RegionAssignment,
    WeightModel,
    assign_regions,
    reflector_measure,
    regularity_report,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    FeasibilityError,
    FloorError,
    LumenError,
    MinimalityViolation,
    NumericError,
)
from .geometry import DeltaBound, Ellipsoid, Paraboloid, c_delta
from .solver import (
    SolverConfig,
    SolveReport,
    check_energy_condition,
    optimal_delta,
    overshoot_minimality_check,
    solve_discrete,
    solve_general,
    visibility_report,
)
from .sphere import (
    DomainSpec,
    IntensityField,
    PlanarPatch,
    SphericalGrid,
    TargetMeasure,
    build_grid,
    build_partition,
    integrate,
    refine_partition,
)
from .validate import (
    compare_constant_weight,
    obstruction_raycheck,
    raytrace,
    sample_directions,
    transport_residual,
)

__version__ = "0.1.0"
