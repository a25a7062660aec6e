"""Hellinger-Kantorovich distances and minimizing-movement schemes."""

from .cone import ConePoint, cone_distance, geodesic, geodesic_right_derivatives, s_map, transport_cost
from .energy import AffinePotential, EnergySpec, LogEntropy, PowerLaw, SampledPotential, ZeroPotential, energy_of
from .hk_solver import HKSolution, SolverConfig, SolverError, hk2, hk_tiny_oracle, let_objective, solve_hk
from .jko import SchemeConfig, Trajectory, dissipation_diagnostics, jko_step, run_scheme
from .measures import DiscreteMeasure, GridDensity, Params, PerturbationField, perturb
from .subdiff import superdiff_check, superdiff_element
from .verification import fd_reference_solve, slope_lower_bound_check, weak_form_residual

__version__ = "0.1.0"

__all__ = [
    "AffinePotential",
    "ConePoint",
    "DiscreteMeasure",
    "EnergySpec",
    "GridDensity",
    "HKSolution",
    "LogEntropy",
    "Params",
    "PerturbationField",
    "PowerLaw",
    "SampledPotential",
    "SchemeConfig",
    "SolverConfig",
    "SolverError",
    "Trajectory",
    "ZeroPotential",
    "cone_distance",
    "dissipation_diagnostics",
    "energy_of",
    "fd_reference_solve",
    "geodesic",
    "geodesic_right_derivatives",
    "hk2",
    "hk_tiny_oracle",
    "jko_step",
    "let_objective",
    "perturb",
    "run_scheme",
    "s_map",
    "slope_lower_bound_check",
    "solve_hk",
    "superdiff_check",
    "superdiff_element",
    "transport_cost",
    "weak_form_residual",
]
