"""Localized time stepping for the acoustic wave equation on uniform Q1 meshes."""
from .errors import ConfigError, NumericalError
from .mesh import ElementSet, MeshHierarchy, build_hierarchy, extend_patch
from .fem import CoefficientField, constant_coefficient, random_coefficient
from .timestepping import ProblemSpec, run_global_cn
from .superposition import LsmConfig, run_lsm, compare_to_global

__all__ = [
    "ConfigError",
    "NumericalError",
    "ElementSet",
    "MeshHierarchy",
    "build_hierarchy",
    "extend_patch",
    "CoefficientField",
    "constant_coefficient",
    "random_coefficient",
    "ProblemSpec",
    "run_global_cn",
    "LsmConfig",
    "run_lsm",
    "compare_to_global",
]
__version__ = "0.1.0"
