"""Per-slot, per-agent orchestration: predict, iterate message fusion, refine.

Two entry points:

* `step_agent` runs one agent through a whole slot against a frozen inbox
  (peer beliefs fixed at the values they had when the inbox was built).
* `run_slot` advances a whole network synchronously: within each fusion
  iteration every agent reads only iteration-(l-1) broadcasts, so processing
  order cannot change any result.

Iteration 0 of the fusion loop starts from the Stage-1 prior marginals; the
linearization point for spatial messages is refreshed every iteration from
the agent's own current fused belief. The temporal message is computed once
per slot at the predicted mean and re-fused (never re-linearized) in every
iteration. Fusion order is fixed (prior, temporal, anchors, peers in inbox
order), which keeps replays bit-identical.

Internally beliefs circulate as plain (mean_x, var_x, mean_y, var_y) tuples;
the dataclass wrappers are built once per slot at the boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

from .core import (
    AxisGaussian,
    InternalMeasurement,
    NodeId,
    PeerBelief,
    Position2D,
    PositionBelief,
    RangeMeasurement,
    StateBelief,
    TransitionModel,
)
from .ekf import ekf_predict, ekf_update
from .messages import EPS_DIST, Axis, temporal_message

TEMPORAL_SOURCES = ("refined", "fused")

# (mean_x, var_x, mean_y, var_y)
BeliefTuple = tuple[float, float, float, float]


@dataclass(frozen=True)
class Inbox:
    """Everything one agent received in one slot."""

    anchor_obs: tuple[tuple[Position2D, RangeMeasurement], ...] = ()
    agent_obs: tuple[tuple[NodeId, RangeMeasurement], ...] = ()
    peer_beliefs: Mapping[NodeId, PeerBelief] = field(default_factory=dict)
    internal: Optional[InternalMeasurement] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "peer_beliefs", MappingProxyType(dict(self.peer_beliefs)))
        for node, _ in self.agent_obs:
            if node not in self.peer_beliefs:
                raise ValueError(f"agent observation from {node} has no peer belief")

    def neighbor_count(self) -> int:
        return len(self.anchor_obs) + len(self.agent_obs)


@dataclass(frozen=True)
class AgentRuntime:
    """Estimator state of one agent plus per-slot instrumentation counters."""

    node: NodeId
    belief: StateBelief
    fused: PeerBelief
    prev_posterior: Optional[PeerBelief] = None
    spatial_evals: int = 0
    spatial_rejects: int = 0

    @classmethod
    def fresh(cls, node: NodeId, belief: StateBelief) -> "AgentRuntime":
        return cls(node=node, belief=belief, fused=belief.position_marginals())


def broadcast_belief(rt: AgentRuntime) -> PeerBelief:
    """Current per-axis position belief, as shared with neighbors."""
    return rt.fused


def count_message_ops(rt: AgentRuntime) -> int:
    """Spatial message evaluations performed in the last step (both axes)."""
    return rt.spatial_evals


def _belief_tuple(b: PeerBelief) -> BeliefTuple:
    return (b.x.mean, b.x.variance, b.y.mean, b.y.variance)


def _wrap_belief(t: BeliefTuple) -> PeerBelief:
    return PeerBelief(x=AxisGaussian(t[0], t[1]), y=AxisGaussian(t[2], t[3]))


@dataclass
class _AgentPlan:
    """Per-slot fusion inputs for one agent, indexed for the hot loop."""

    prior: BeliefTuple
    # Temporal contributions as (mean, variance) or None, fused first.
    temporal_x: Optional[tuple[float, float]]
    temporal_y: Optional[tuple[float, float]]
    # Fixed-position sources (anchors): (x, y, z, var, extra_var_x, extra_var_y).
    sources: list[tuple[float, float, float, float, float, float]]
    peers: list[tuple[int, float, float]]  # (peer index, z, var)


def _make_plan(
    predicted: StateBelief,
    prev_posterior: Optional[PeerBelief],
    inbox: Inbox,
    index_of: Mapping[NodeId, int],
) -> _AgentPlan:
    prior = _belief_tuple(predicted.position_marginals())
    t_x = t_y = None
    if inbox.internal is not None and prev_posterior is not None:
        cur = predicted.position()
        mx = temporal_message(Axis.X, cur, prev_posterior, inbox.internal)
        my = temporal_message(Axis.Y, cur, prev_posterior, inbox.internal)
        t_x = (mx.mean, mx.variance) if mx is not None else None
        t_y = (my.mean, my.variance) if my is not None else None
    return _AgentPlan(
        prior=prior,
        temporal_x=t_x,
        temporal_y=t_y,
        sources=[(p.x, p.y, z.value, z.variance, 0.0, 0.0) for p, z in inbox.anchor_obs],
        peers=[(index_of[node], z.value, z.variance) for node, z in inbox.agent_obs],
    )


_SQRT = math.sqrt
_INF = math.inf


def _fuse_iteration(
    plan: _AgentPlan,
    own: BeliefTuple,
    peer_values: Sequence[BeliefTuple],
) -> tuple[BeliefTuple, int, int, int]:
    """One spatial iteration: relinearize at `own`, fuse everything accepted.

    The message arithmetic is an inlined, bit-identical copy of
    `messages.range_message_pair` (pinned by a property test); at ~10 calls
    per agent-iteration the call overhead would dominate otherwise.

    Returns (fused, evaluations, rejections, accepted incl. temporal).
    """
    lin_x = own[0]
    lin_y = own[2]
    prior = plan.prior
    prec_x = 1.0 / prior[1]
    acc_x = prior[0] / prior[1]
    prec_y = 1.0 / prior[3]
    acc_y = prior[2] / prior[3]
    accepted_x = 0
    accepted_y = 0
    if plan.temporal_x is not None:
        m, v = plan.temporal_x
        prec_x += 1.0 / v
        acc_x += m / v
        accepted_x += 1
    if plan.temporal_y is not None:
        m, v = plan.temporal_y
        prec_y += 1.0 / v
        acc_y += m / v
        accepted_y += 1
    evals = 0
    rejects = 0
    for sx, sy, z, z_var, extra_x, extra_y in plan.sources:
        evals += 2
        ex = lin_x - sx
        ey = lin_y - sy
        r = _SQRT(ex * ex + ey * ey)
        if r < EPS_DIST:
            rejects += 2
            continue
        delta = z - r
        denom = r * (r - z)
        gx = ex / r
        gy = ey / r
        var = z_var * (gx * gx)
        if ey != 0.0:
            var = _INF if denom == 0.0 else var + (z_var * (ey * ey)) / denom
        var += extra_x
        if 0.0 < var < _INF:
            prec_x += 1.0 / var
            acc_x += (lin_x + delta * gx) / var
            accepted_x += 1
        else:
            rejects += 1
        var = z_var * (gy * gy)
        if ex != 0.0:
            var = _INF if denom == 0.0 else var + (z_var * (ex * ex)) / denom
        var += extra_y
        if 0.0 < var < _INF:
            prec_y += 1.0 / var
            acc_y += (lin_y + delta * gy) / var
            accepted_y += 1
        else:
            rejects += 1
    for peer_idx, z, z_var in plan.peers:
        peer = peer_values[peer_idx]
        evals += 2
        ex = lin_x - peer[0]
        ey = lin_y - peer[2]
        r = _SQRT(ex * ex + ey * ey)
        if r < EPS_DIST:
            rejects += 2
            continue
        delta = z - r
        denom = r * (r - z)
        gx = ex / r
        gy = ey / r
        var = z_var * (gx * gx)
        if ey != 0.0:
            var = _INF if denom == 0.0 else var + (z_var * (ey * ey)) / denom
        var += peer[1]
        if 0.0 < var < _INF:
            prec_x += 1.0 / var
            acc_x += (lin_x + delta * gx) / var
            accepted_x += 1
        else:
            rejects += 1
        var = z_var * (gy * gy)
        if ex != 0.0:
            var = _INF if denom == 0.0 else var + (z_var * (ex * ex)) / denom
        var += peer[3]
        if 0.0 < var < _INF:
            prec_y += 1.0 / var
            acc_y += (lin_y + delta * gy) / var
            accepted_y += 1
        else:
            rejects += 1
    accepted = accepted_x + accepted_y
    if accepted == 0:
        # Nothing to fuse: the belief stays exactly at the prior marginals.
        return prior, evals, rejects, 0
    # Per-axis empty sums keep that axis exactly at its prior marginal.
    if accepted_x:
        var_x = 1.0 / prec_x
        mean_x = var_x * acc_x
    else:
        mean_x, var_x = prior[0], prior[1]
    if accepted_y:
        var_y = 1.0 / prec_y
        mean_y = var_y * acc_y
    else:
        mean_y, var_y = prior[2], prior[3]
    return (mean_x, var_x, mean_y, var_y), evals, rejects, accepted


def _finish_slot(
    rt: AgentRuntime,
    predicted: StateBelief,
    fused: BeliefTuple,
    informative: bool,
    evals: int,
    rejects: int,
    temporal_source: str,
) -> AgentRuntime:
    """Refine (or dead-reckon) and roll the runtime forward one slot."""
    fused_belief = _wrap_belief(fused)
    if informative:
        belief = ekf_update(
            predicted,
            PositionBelief(
                mean_x=fused[0], mean_y=fused[2], var_x=fused[1], var_y=fused[3]
            ),
        )
    else:
        # Nothing but the prior survived: fusing it back in would double-count.
        belief = predicted
    if temporal_source == "refined":
        prev_posterior = belief.position_marginals()
    else:
        prev_posterior = fused_belief
    return replace(
        rt,
        belief=belief,
        fused=fused_belief,
        prev_posterior=prev_posterior,
        spatial_evals=evals,
        spatial_rejects=rejects,
    )


def _check_args(l_max: int, temporal_source: str) -> None:
    if l_max < 1:
        raise ValueError(f"l_max must be positive, got {l_max}")
    if temporal_source not in TEMPORAL_SOURCES:
        raise ValueError(f"temporal_source must be one of {TEMPORAL_SOURCES}")


def step_agent(
    rt: AgentRuntime,
    inbox: Inbox,
    model: TransitionModel,
    l_max: int,
    temporal_source: str = "refined",
) -> AgentRuntime:
    """Advance one agent a full slot against a frozen inbox.

    Peer beliefs stay at their inbox values for all iterations; the agent's own
    linearization point still refreshes every iteration. Deterministic given
    its inputs; an empty factor graph degrades to dead reckoning, never fails.
    """
    _check_args(l_max, temporal_source)
    predicted = ekf_predict(rt.belief, model)
    peer_nodes = sorted(inbox.peer_beliefs)
    index_of = {node: i for i, node in enumerate(peer_nodes)}
    peer_values = [_belief_tuple(inbox.peer_beliefs[node]) for node in peer_nodes]
    plan = _make_plan(predicted, rt.prev_posterior, inbox, index_of)

    fused = plan.prior
    evals = 0
    rejects = 0
    informative = False
    for _ in range(l_max):
        fused, it_evals, it_rejects, it_accepted = _fuse_iteration(plan, fused, peer_values)
        evals += it_evals
        rejects += it_rejects
        informative = it_accepted > 0
    return _finish_slot(rt, predicted, fused, informative, evals, rejects, temporal_source)


def run_slot(
    runtimes: Mapping[NodeId, AgentRuntime],
    inboxes: Mapping[NodeId, Inbox],
    model: TransitionModel,
    l_max: int,
    temporal_source: str = "refined",
) -> dict[NodeId, AgentRuntime]:
    """Advance every agent one slot with synchronous belief broadcast.

    Each fusion iteration reads only the previous iteration's broadcasts, so
    any processing order yields bit-identical results. Agents are processed in
    NodeId order to keep float summation order fixed as well.
    """
    _check_args(l_max, temporal_source)
    nodes = sorted(runtimes)
    index_of = {node: i for i, node in enumerate(nodes)}
    predicted: list[StateBelief] = []
    plans: list[_AgentPlan] = []
    for node in nodes:
        rt = runtimes[node]
        pred = ekf_predict(rt.belief, model)
        predicted.append(pred)
        plans.append(_make_plan(pred, rt.prev_posterior, inboxes[node], index_of))

    n = len(nodes)
    fused: list[BeliefTuple] = [plan.prior for plan in plans]
    evals = [0] * n
    rejects = [0] * n
    final_accepted = [0] * n
    for _ in range(l_max):
        broadcast = fused
        next_fused: list[BeliefTuple] = []
        for i in range(n):
            new_belief, it_evals, it_rejects, it_accepted = _fuse_iteration(
                plans[i], broadcast[i], broadcast
            )
            next_fused.append(new_belief)
            evals[i] += it_evals
            rejects[i] += it_rejects
            final_accepted[i] = it_accepted
        fused = next_fused

    return {
        node: _finish_slot(
            runtimes[node],
            predicted[i],
            fused[i],
            final_accepted[i] > 0,
            evals[i],
            rejects[i],
            temporal_source,
        )
        for i, node in enumerate(nodes)
    }
