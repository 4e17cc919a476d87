"""Finite-dimensional ODE surrogates for dissipative systems with a finite-dimensional attractor.

Pipeline: sample the attractor, check covering-dimension gates, embed it with
a random linear map, extend the conjugated field with a log-Lipschitz
modulus, add a softmin Lyapunov correction, and verify the resulting flow.
"""

from .errors import (
    AttraktError,
    BetaLadderError,
    DomainError,
    FormatError,
    GateError,
    InjectivityError,
    IntegratorError,
    SettlingError,
)
from .geometry import PointCloud, hausdorff_distance, semidistance
from .systems import AttractorSample, SystemSpec, sample_attractor

__version__ = "0.1.0"

__all__ = [
    "AttraktError",
    "BetaLadderError",
    "DomainError",
    "FormatError",
    "GateError",
    "InjectivityError",
    "IntegratorError",
    "SettlingError",
    "PointCloud",
    "hausdorff_distance",
    "semidistance",
    "AttractorSample",
    "SystemSpec",
    "sample_attractor",
]
