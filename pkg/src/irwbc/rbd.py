"""Rigid-body kinematics and dynamics for open-chain robots.

Public surface over the model description (`_model`) and the dynamics
algorithms (`_dynamics`).  Conventions used throughout the package:

* generalized velocity layout: ``[v_base(3); omega_base(3); qdot_joints]``
  for floating-base models, ``[qdot_joints]`` for fixed-base ones, with the
  base twist world-aligned at the base origin,
* frame outputs use world axes with the origin at the frame
  (local-world-aligned),
* base orientation is a unit quaternion ``(w, x, y, z)``, integrated by the
  exponential map of the world angular velocity and renormalized.

``RobotModel`` is immutable after :func:`build_model`; every operation here
is a pure function of its inputs, so models and states can be shared across
threads freely.
"""
from ._dynamics import (
    bias_forces,
    forward_dynamics,
    frame_kinematics,
    integrate_state,
    inverse_dynamics,
    mass_matrix,
)
from ._model import (
    Frame,
    FrameKinematics,
    Joint,
    RobotModel,
    RobotState,
    SpatialInertia,
    build_model,
)

__all__ = [
    "Frame",
    "FrameKinematics",
    "Joint",
    "RobotModel",
    "RobotState",
    "SpatialInertia",
    "bias_forces",
    "build_model",
    "forward_dynamics",
    "frame_kinematics",
    "integrate_state",
    "inverse_dynamics",
    "mass_matrix",
]
