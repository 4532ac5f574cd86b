"""Globally optimal robust point matching by inner approximation of a concave
energy over the correspondence polytope."""
from .assignment import AssignmentSolution, Correspondence, brute_force_assignment, max_kcard_assignment
from .bench import TrialResult, TrialSpec, generate_trial, rms_error, run_suite
from .errors import RegistrationError
from .objective import ReducedObjective, build_reduction, energy_p, energy_u
from .solver import SolverConfig, SolverResult, Status, brute_force_register, run_inner_approximation
from .transform_models import ModelKind, apply, solve_phi

__version__ = "0.1.0"

__all__ = [
    "AssignmentSolution",
    "Correspondence",
    "ModelKind",
    "ReducedObjective",
    "RegistrationError",
    "SolverConfig",
    "SolverResult",
    "Status",
    "TrialResult",
    "TrialSpec",
    "apply",
    "brute_force_assignment",
    "brute_force_register",
    "build_reduction",
    "energy_p",
    "energy_u",
    "generate_trial",
    "max_kcard_assignment",
    "rms_error",
    "run_inner_approximation",
    "run_suite",
    "solve_phi",
]
