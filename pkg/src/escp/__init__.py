"""Embedded sequential convex programming (E-SCP) for trajectory optimization on manifolds."""

from .dynamics import ControlAffineSystem, freeflyer, make_model, torus_manipulator, double_integrator
from .manifold import EmbeddedManifold
from .problem import Obstacle, OcpProblem, state_waypoint
from .transcription import DiscreteTrajectory, QpData, ScpParams

__version__ = "0.1.0"

__all__ = [
    "ControlAffineSystem",
    "DiscreteTrajectory",
    "EmbeddedManifold",
    "Obstacle",
    "OcpProblem",
    "QpData",
    "ScpParams",
    "double_integrator",
    "freeflyer",
    "make_model",
    "state_waypoint",
    "torus_manipulator",
]
