"""Closed-form per-axis Gaussian messages for the data-fusion stage.

Each range factor contributes, per coordinate axis, a 1D Gaussian obtained by
(i) expanding the squared range residual to second order around the current
linearization point and (ii) integrating the remaining variables analytically.
With e the offset from the source estimate, r = |e|, delta = z - r and
(on, off) the axis decomposition of e, the result is

    mean     = lin_axis + delta * on / r
    variance = sigma^2 * [ (on/r)^2 + off^2 / (r * (r - z)) ]   (+ the source's
               own on-axis variance for agent-to-agent and temporal messages;
               its off-axis variance integrates out exactly).

The quadratic expansion is a local approximation: away from the linearization
point it can imply a non-positive or infinite "variance". Such messages are
rejected (None) and simply dropped from the fusion sums, which is the only
treatment that keeps beliefs valid Gaussians.

`range_message_pair` is the single implementation of the formulas; the
per-axis functions wrap it. It works on plain floats because it sits inside
the per-iteration hot loop.
"""

from __future__ import annotations

import enum
import math
from typing import Iterable, Optional

from .core import (
    AxisGaussian,
    InternalMeasurement,
    PeerBelief,
    Position2D,
    RangeMeasurement,
)

# Geometry guard: every coefficient divides by powers of |e|.
EPS_DIST = 1e-3

MomentPair = tuple[float, float]  # (mean, variance)


class Axis(enum.Enum):
    X = 0
    Y = 1


_SQRT = math.sqrt
_INF = math.inf


def range_message_pair(
    lin_x: float,
    lin_y: float,
    src_x: float,
    src_y: float,
    z_value: float,
    z_variance: float,
    extra_var_x: float = 0.0,
    extra_var_y: float = 0.0,
) -> tuple[Optional[MomentPair], Optional[MomentPair]]:
    """Both axis messages of one range factor, as (mean, variance) or None.

    extra_var_* carries the source's own positional uncertainty (zero for
    anchors, the peer/previous-posterior axis variances otherwise).

    The fusion loop in `localizer` inlines this arithmetic verbatim; a
    property test pins the two copies to exact equality.
    """
    ex = lin_x - src_x
    ey = lin_y - src_y
    r = _SQRT(ex * ex + ey * ey)
    if r < EPS_DIST:
        return None, None
    delta = z_value - r
    denom = r * (r - z_value)
    gx = ex / r
    gy = ey / r

    msg_x: Optional[MomentPair] = None
    var = z_variance * (gx * gx)
    if ey != 0.0:
        var = _INF if denom == 0.0 else var + (z_variance * (ey * ey)) / denom
    var += extra_var_x
    if 0.0 < var < _INF:
        msg_x = (lin_x + delta * gx, var)

    msg_y: Optional[MomentPair] = None
    var = z_variance * (gy * gy)
    if ex != 0.0:
        var = _INF if denom == 0.0 else var + (z_variance * (ex * ex)) / denom
    var += extra_var_y
    if 0.0 < var < _INF:
        msg_y = (lin_y + delta * gy, var)

    return msg_x, msg_y


def _pick(
    axis: Axis, pair: tuple[Optional[MomentPair], Optional[MomentPair]]
) -> Optional[AxisGaussian]:
    moments = pair[0] if axis is Axis.X else pair[1]
    if moments is None:
        return None
    return AxisGaussian(mean=moments[0], variance=moments[1])


def anchor_message(
    axis: Axis,
    lin_point: Position2D,
    anchor_pos: Position2D,
    z: RangeMeasurement,
) -> Optional[AxisGaussian]:
    """Message an anchor range induces on one position coordinate.

    Anchor positions are exact constants, so the kernel variance is the whole
    message variance. Returns None on degenerate geometry or when the implied
    Gaussian is invalid.
    """
    return _pick(
        axis,
        range_message_pair(
            lin_point.x, lin_point.y, anchor_pos.x, anchor_pos.y, z.value, z.variance
        ),
    )


def agent_message(
    axis: Axis,
    lin_point_i: Position2D,
    peer: PeerBelief,
    z: RangeMeasurement,
) -> Optional[AxisGaussian]:
    """Message a peer-agent range induces on one position coordinate."""
    return _pick(
        axis,
        range_message_pair(
            lin_point_i.x,
            lin_point_i.y,
            peer.x.mean,
            peer.y.mean,
            z.value,
            z.variance,
            extra_var_x=peer.x.variance,
            extra_var_y=peer.y.variance,
        ),
    )


def temporal_message(
    axis: Axis,
    cur_lin_point: Position2D,
    prev_posterior: PeerBelief,
    z_int: InternalMeasurement,
) -> Optional[AxisGaussian]:
    """Message the traveled-distance measurement induces on one coordinate.

    Structurally the agent-to-agent message with the previous-slot posterior
    in the peer role. Computed once per slot at the predicted mean; it does
    not get re-linearized inside the spatial iterations.
    """
    return _pick(
        axis,
        range_message_pair(
            cur_lin_point.x,
            cur_lin_point.y,
            prev_posterior.x.mean,
            prev_posterior.y.mean,
            z_int.value,
            z_int.variance,
            extra_var_x=prev_posterior.x.variance,
            extra_var_y=prev_posterior.y.variance,
        ),
    )


def fuse_axis(prior: AxisGaussian, messages: Iterable[AxisGaussian]) -> AxisGaussian:
    """Precision-weighted product of the prior with all accepted messages."""
    msgs = list(messages)
    if not msgs:
        return prior
    precision = 1.0 / prior.variance
    weighted = prior.mean / prior.variance
    for msg in msgs:
        precision += 1.0 / msg.variance
        weighted += msg.mean / msg.variance
    variance = 1.0 / precision
    return AxisGaussian(mean=variance * weighted, variance=variance)
