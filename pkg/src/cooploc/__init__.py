"""Cooperative positioning at desk scale.

Three-stage per-slot estimator (predict, per-axis Gaussian message passing,
refine) for mobile range-measuring networks, with particle baselines, a
discrete-time world simulator, quadrature/least-squares oracles, and a
Monte-Carlo benchmark harness.
"""

from .core import (
    AgentTruth,
    AxisGaussian,
    InternalMeasurement,
    Kind,
    NodeId,
    NumericalFailure,
    PeerBelief,
    Position2D,
    PositionBelief,
    RangeMeasurement,
    StateBelief,
    TransitionModel,
    Velocity2D,
    agent_id,
    anchor_id,
)
from .ekf import ekf_predict, ekf_update, make_transition_model
from .messages import Axis, agent_message, anchor_message, fuse_axis, temporal_message

__all__ = [
    "AgentTruth",
    "Axis",
    "AxisGaussian",
    "InternalMeasurement",
    "Kind",
    "NodeId",
    "NumericalFailure",
    "PeerBelief",
    "Position2D",
    "PositionBelief",
    "RangeMeasurement",
    "StateBelief",
    "TransitionModel",
    "Velocity2D",
    "agent_id",
    "agent_message",
    "anchor_id",
    "anchor_message",
    "ekf_predict",
    "ekf_update",
    "fuse_axis",
    "make_transition_model",
    "temporal_message",
]

__version__ = "0.1.0"
