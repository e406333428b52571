"""Desk-scale laboratory for conical Kahler-Ricci flows on model surfaces."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import (
    ArchiveError,
    CompatibilityError,
    ConeflowError,
    ConfigurationError,
    PositivityError,
    SolverError,
)
from .surfaces import (
    MIN_RESOLUTION,
    DivisorData,
    ModelSurface,
    ScalarField,
    SurfaceKind,
    build_surface,
    ddbar_density,
    divisor_section,
    integrate,
    laplacian,
    poisson_solve,
)
from .background import (
    BackgroundPack,
    FlowParams,
    build_pack,
    compute_tmax,
    path_constant,
    resolvability_floor,
    select_k,
)
from .initial_data import (
    DatumKind,
    InitialDatum,
    flow_level_values,
    make_initial,
    smoothed_datum_values,
)
from .flow import (
    SERIES_COLUMNS,
    FlowState,
    Scheme,
    StepControl,
    Termination,
    Trajectory,
    run_flow,
    static_ma_solve,
    time_reparam,
)
from .estimates import (
    ComparisonVerdict,
    EstimateReport,
    check_comparison,
    check_density_ratio,
    check_hstat,
    check_l1_convergence,
    check_lower_barrier,
    check_lower_envelope,
    check_monotone_eps,
    check_osc,
    check_phidot_lower,
    check_reparam_ordering,
    check_upper_barrier,
    divergence_signature,
)
from .config import RunConfig, emit_config, parse_config, resolve_flow_params
from .archive import (
    Archive,
    check_integrity,
    load_archive,
    series_csv,
    snapshot_csv,
    write_archive,
)
from .cli import main

__all__ = [
    "ArchiveError",
    "CompatibilityError",
    "ConeflowError",
    "ConfigurationError",
    "PositivityError",
    "SolverError",
    "MIN_RESOLUTION",
    "DivisorData",
    "ModelSurface",
    "ScalarField",
    "SurfaceKind",
    "build_surface",
    "ddbar_density",
    "divisor_section",
    "integrate",
    "laplacian",
    "poisson_solve",
    "BackgroundPack",
    "FlowParams",
    "build_pack",
    "compute_tmax",
    "path_constant",
    "resolvability_floor",
    "select_k",
    "DatumKind",
    "InitialDatum",
    "flow_level_values",
    "make_initial",
    "smoothed_datum_values",
    "SERIES_COLUMNS",
    "FlowState",
    "Scheme",
    "StepControl",
    "Termination",
    "Trajectory",
    "run_flow",
    "static_ma_solve",
    "time_reparam",
    "ComparisonVerdict",
    "EstimateReport",
    "check_comparison",
    "check_density_ratio",
    "check_hstat",
    "check_l1_convergence",
    "check_lower_barrier",
    "check_lower_envelope",
    "check_monotone_eps",
    "check_osc",
    "check_phidot_lower",
    "check_reparam_ordering",
    "check_upper_barrier",
    "divergence_signature",
    "RunConfig",
    "emit_config",
    "parse_config",
    "resolve_flow_params",
    "Archive",
    "check_integrity",
    "load_archive",
    "series_csv",
    "snapshot_csv",
    "write_archive",
    "main",
    "__version__",
]
