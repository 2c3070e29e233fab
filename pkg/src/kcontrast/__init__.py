"""kcontrast: minimum-contrast estimation of parametric first-order
intensities of spatial and spatio-temporal point processes, built on
intensity-weighted K-functions with radial penalization."""

from .model import (
    IntensityEvaluationError,
    IntensityModel,
    KEstimate,
    LagGrid,
    PointPattern,
    Window,
    coordinate_covariate,
    eval_intensity,
    integrate_intensity,
    loglinear_model,
    make_lag_grid,
    unit_cube,
    unit_square,
)
from .simulate import (
    ScenarioSpec,
    scenario,
    scenario_pattern,
    simulate_homogeneous,
    simulate_inhomogeneous,
    stream_rng,
)
from .kstat import (
    k_homog,
    k_inhom,
    k_local_homog,
    k_local_inhom,
    poisson_reference,
    theoretical_k,
)
from .fit import (
    ContrastConfig,
    FitResult,
    LocalFitResult,
    MinimizeOptions,
    PenaltyConfig,
    contrast_objective,
    estimate_se,
    fit_global,
    fit_local,
    local_objective,
    minimize,
    penalty_term,
)
from .diagnostics import (
    ResidualField,
    RSelection,
    select_bandwidth,
    select_r_oracle,
    select_r_residual,
    smooth_residual_field,
)
from .study import StudyConfig, StudyReport, aggregate, run_mc_study

__version__ = "0.1.0"
