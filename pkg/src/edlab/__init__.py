"""Entropic-dynamics lattice toolkit.

Ensemble states on a configuration grid, their local-time evolution along a
foliation, a walker sampler, and checks of path independence and closure.
"""
from .dynamics import CandidateCoefficients, PotentialSpec, SiteGeometry, evolve, step
from .geometry import Deformation, FoliationSchedule, Hypersurface, SpacetimeBackground
from .kernels import BACKEND
from .statespace import ConfigGrid, Constants, EnsembleState, WaveState, gaussian_state

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CandidateCoefficients",
    "ConfigGrid",
    "Constants",
    "Deformation",
    "EnsembleState",
    "FoliationSchedule",
    "Hypersurface",
    "PotentialSpec",
    "SiteGeometry",
    "SpacetimeBackground",
    "WaveState",
    "evolve",
    "gaussian_state",
    "step",
    "__version__",
]
