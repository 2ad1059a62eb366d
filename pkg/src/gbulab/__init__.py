"""Numerical lab for gradient blow-up in u_t - Lap u = |grad u|^p + h(x)."""

from .geometry import DomainSpec, Mesh, build_mesh, distance_field
from .solver import PExponents, Problem, SamplePolicy, StepControls, run

__all__ = [
    "DomainSpec",
    "Mesh",
    "build_mesh",
    "distance_field",
    "PExponents",
    "Problem",
    "SamplePolicy",
    "StepControls",
    "run",
]
__version__ = "0.1.0"
