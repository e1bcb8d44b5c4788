"""Nested-periodic homogenization of parabolic monotone operators."""

from . import cell, config, effective, grids, harness, operators, orlicz, pde, plots
from .cell import (
    CellProblemSpec,
    SolverParams,
    solve_cell,
    solve_cell_batch,
    solve_inner_corrector,
    solve_outer_corrector,
)
from .config import ExperimentConfig, config_from_dict, default_config, load_config
from .effective import (
    EffectiveFluxTable,
    corrector_pairing_moment,
    effective_flux_q,
    mid_flux_h,
    outer_corrector,
    tabulate_q,
)
from .errors import CheckError, ConfigError, SolverError
from .grids import DomainGrid, PeriodicCellGrid, ThetaGrid, TimeGrid
from .harness import (
    build_twoscale_candidate,
    default_pairing_family,
    run_convergence_study,
    run_manufactured_test,
    run_twoscale_test,
)
from .operators import (
    FluxOperator,
    TrigPoly,
    custom_operator,
    linear_separable,
    power_law,
    reference_linear,
    reference_power_law,
    verify_axioms,
)
from .orlicz import (
    DiscreteField,
    NFunction,
    custom,
    luxemburg_norm,
    modular,
    power,
    power_log,
    simonenko_indices,
)
from .pde import (
    ParabolicProblem,
    SolutionHistory,
    effective_problem,
    fine_problem,
    fine_solve,
    macro_solve,
)

__all__ = [
    "cell",
    "config",
    "effective",
    "grids",
    "harness",
    "operators",
    "orlicz",
    "pde",
    "plots",
    "CellProblemSpec",
    "SolverParams",
    "solve_cell",
    "solve_cell_batch",
    "solve_inner_corrector",
    "solve_outer_corrector",
    "ExperimentConfig",
    "config_from_dict",
    "default_config",
    "load_config",
    "EffectiveFluxTable",
    "corrector_pairing_moment",
    "effective_flux_q",
    "mid_flux_h",
    "outer_corrector",
    "tabulate_q",
    "CheckError",
    "ConfigError",
    "SolverError",
    "DomainGrid",
    "PeriodicCellGrid",
    "ThetaGrid",
    "TimeGrid",
    "build_twoscale_candidate",
    "default_pairing_family",
    "run_convergence_study",
    "run_manufactured_test",
    "run_twoscale_test",
    "FluxOperator",
    "TrigPoly",
    "custom_operator",
    "linear_separable",
    "power_law",
    "reference_linear",
    "reference_power_law",
    "verify_axioms",
    "DiscreteField",
    "NFunction",
    "custom",
    "luxemburg_norm",
    "modular",
    "power",
    "power_log",
    "simonenko_indices",
    "ParabolicProblem",
    "SolutionHistory",
    "effective_problem",
    "fine_problem",
    "fine_solve",
    "macro_solve",
]

__version__ = "0.1.0"
