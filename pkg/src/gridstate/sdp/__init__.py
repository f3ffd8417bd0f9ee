"""Moment relaxations of the estimation problem."""

from .ipm import SdpSolution, solve_sdp
from .moments import (
    MonomialBasis,
    build_basis,
    localizing_matrix,
    mixture_moments,
    moment_matrix,
    point_moments,
)
from .pop import Constraint, PopProblem, estimation_pop
from .relax import SdpProblem, build_moment_sdp, extract_candidate
from .sdpa import export_sdpa, parse_sdpa

__all__ = [
    "MonomialBasis",
    "build_basis",
    "moment_matrix",
    "localizing_matrix",
    "point_moments",
    "mixture_moments",
    "Constraint",
    "PopProblem",
    "estimation_pop",
    "SdpProblem",
    "build_moment_sdp",
    "extract_candidate",
    "SdpSolution",
    "solve_sdp",
    "export_sdpa",
    "parse_sdpa",
]
