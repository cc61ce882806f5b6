"""Viability of smooth domains for SDEs with path-dependent coefficients."""

from .domains import Barrier, BallDomain, EllipsoidDomain, inner_domain
from .paths import CadlagPath, PathPair
from .sde import PathCoefficients, SimConfig, coefficients_from_spec, simulate, simulate_paths

__all__ = [
    "Barrier",
    "BallDomain",
    "CadlagPath",
    "EllipsoidDomain",
    "PathCoefficients",
    "PathPair",
    "SimConfig",
    "coefficients_from_spec",
    "inner_domain",
    "simulate",
    "simulate_paths",
]
