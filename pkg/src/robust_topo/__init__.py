"""Robust worst-case multiple-load topology optimization under ellipsoidal load uncertainty."""
from .design import FeasibleSet, MultiLoadProblem, MultiLoadResult, compliance, solve_multiload
from .inhomeig import InhomEigProblem, companion_solve, power_method, solve_largest
from .mesh import StructuralModel, build_ground_structure, build_sheet_mesh, build_truss, solve_equilibrium
from .robust import RobustConfig, RobustReport, audit, robustify
from .uncertainty import EllipsoidSpec, LoadCase, vulnerability, worst_case_load

__all__ = [
    "EllipsoidSpec",
    "FeasibleSet",
    "InhomEigProblem",
    "LoadCase",
    "MultiLoadProblem",
    "MultiLoadResult",
    "RobustConfig",
    "RobustReport",
    "StructuralModel",
    "audit",
    "build_ground_structure",
    "build_sheet_mesh",
    "build_truss",
    "companion_solve",
    "compliance",
    "power_method",
    "robustify",
    "solve_equilibrium",
    "solve_largest",
    "solve_multiload",
    "vulnerability",
    "worst_case_load",
]
