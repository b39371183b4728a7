"""Particle-based baselines: plain network SPA and its EKF-wrapped variant.

The reweighting kernel exists in two forms that produce bit-identical weights:
a per-particle reference loop (the unit the complexity accounting counts and
the microbenchmark times) and a vectorized batch form used by the long
Monte-Carlo protocols. Both evaluate the same correctly-rounded primitives
and accumulate per-neighbor terms in the same order, then share one
exp/normalize/resample tail, so outputs do not depend on which path ran.

The plain baseline deliberately has no motion filter: clouds are propagated
with a finite-difference velocity estimate plus Gaussian jitter, so any
benefit of explicit mobility tracking shows up only in the EKF variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import (
    AxisGaussian,
    NodeId,
    PeerBelief,
    Position2D,
    PositionBelief,
    StateBelief,
    TransitionModel,
    Velocity2D,
)
from .ekf import ekf_predict, ekf_update
from .localizer import Inbox

# Total-weight underflow threshold (log scale) triggering re-initialization.
_LOG_UNDERFLOW = math.log(1e-300)
# Variance floor for cloud summaries so degenerate clouds stay broadcastable.
_MIN_SUMMARY_VAR = 1e-6


@dataclass(frozen=True)
class ParticleCloud:
    """Weighted 2D particle set."""

    xs: np.ndarray
    ys: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        xs = np.asarray(self.xs, dtype=float)
        ys = np.asarray(self.ys, dtype=float)
        ws = np.asarray(self.weights, dtype=float)
        if xs.ndim != 1 or xs.shape != ys.shape or xs.shape != ws.shape:
            raise ValueError("particle arrays must be 1D and equally sized")
        if xs.size < 2:
            raise ValueError("need at least 2 particles")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys)) and np.all(np.isfinite(ws))):
            raise ValueError("particle entries must be finite")
        if np.any(ws < 0.0) or abs(float(ws.sum()) - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")
        for arr in (xs, ys, ws):
            arr.setflags(write=False)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        object.__setattr__(self, "weights", ws)

    @property
    def count(self) -> int:
        return int(self.xs.size)

    def mean_position(self) -> Position2D:
        return Position2D(
            float(np.dot(self.weights, self.xs)), float(np.dot(self.weights, self.ys))
        )

    def summary(self) -> PeerBelief:
        """Moment-matched per-axis Gaussian summary (what gets broadcast)."""
        mx = float(np.dot(self.weights, self.xs))
        my = float(np.dot(self.weights, self.ys))
        vx = float(np.dot(self.weights, (self.xs - mx) ** 2))
        vy = float(np.dot(self.weights, (self.ys - my) ** 2))
        return PeerBelief(
            x=AxisGaussian(mx, max(vx, _MIN_SUMMARY_VAR)),
            y=AxisGaussian(my, max(vy, _MIN_SUMMARY_VAR)),
        )


def uniform_cloud(
    center: Position2D, radius: float, count: int, rng: np.random.Generator
) -> ParticleCloud:
    """Uniform cloud over a disc (divergence recovery and uninformed starts)."""
    r = radius * np.sqrt(rng.random(count))
    theta = rng.uniform(0.0, 2.0 * math.pi, count)
    return ParticleCloud(
        xs=center.x + r * np.cos(theta),
        ys=center.y + r * np.sin(theta),
        weights=np.full(count, 1.0 / count),
    )


def gaussian_cloud(
    mean_x: float, mean_y: float, std_x: float, std_y: float, count: int, rng: np.random.Generator
) -> ParticleCloud:
    return ParticleCloud(
        xs=rng.normal(mean_x, max(std_x, 1e-9), count),
        ys=rng.normal(mean_y, max(std_y, 1e-9), count),
        weights=np.full(count, 1.0 / count),
    )


@dataclass(frozen=True)
class _Terms:
    """Per-neighbor likelihood parameters: target point, range, 1/(2 var)."""

    tx: np.ndarray
    ty: np.ndarray
    z: np.ndarray
    inv_two_var: np.ndarray

    @property
    def count(self) -> int:
        return int(self.tx.size)


def _terms_from_lists(
    tx: Sequence[float], ty: Sequence[float], z: Sequence[float], i2v: Sequence[float]
) -> _Terms:
    return _Terms(
        tx=np.asarray(tx, dtype=float),
        ty=np.asarray(ty, dtype=float),
        z=np.asarray(z, dtype=float),
        inv_two_var=np.asarray(i2v, dtype=float),
    )


def _inbox_terms(inbox: Inbox, peer_beliefs: Mapping[NodeId, PeerBelief]) -> _Terms:
    """Neighbor terms for a frozen inbox; peer spread folds into the noise."""
    tx: list[float] = []
    ty: list[float] = []
    z: list[float] = []
    i2v: list[float] = []
    for anchor_pos, meas in inbox.anchor_obs:
        tx.append(anchor_pos.x)
        ty.append(anchor_pos.y)
        z.append(meas.value)
        i2v.append(0.5 / meas.variance)
    for node, meas in inbox.agent_obs:
        peer = peer_beliefs[node]
        tx.append(peer.x.mean)
        ty.append(peer.y.mean)
        z.append(meas.value)
        i2v.append(0.5 / (meas.variance + 0.5 * (peer.x.variance + peer.y.variance)))
    return _terms_from_lists(tx, ty, z, i2v)


def _log_weights_reference(xs: np.ndarray, ys: np.ndarray, terms: _Terms) -> np.ndarray:
    """Per-particle likelihood loop; one evaluation per (particle, neighbor)."""
    sqrt = math.sqrt
    xs_list = xs.tolist()
    ys_list = ys.tolist()
    n = len(xs_list)
    lw = [0.0] * n
    for tx, ty, z, inv_two_var in zip(
        terms.tx.tolist(), terms.ty.tolist(), terms.z.tolist(), terms.inv_two_var.tolist()
    ):
        for idx in range(n):
            dx = xs_list[idx] - tx
            dy = ys_list[idx] - ty
            resid = z - sqrt(dx * dx + dy * dy)
            lw[idx] -= (resid * resid) * inv_two_var
    return np.asarray(lw)


def _log_weights_batch(xs: np.ndarray, ys: np.ndarray, terms: _Terms) -> np.ndarray:
    """Vectorized twin of the reference loop (same ops, same term order)."""
    dx = xs[None, :] - terms.tx[:, None]
    dy = ys[None, :] - terms.ty[:, None]
    resid = terms.z[:, None] - np.sqrt(dx * dx + dy * dy)
    sq = (resid * resid) * terms.inv_two_var[:, None]
    lw = np.zeros_like(xs)
    for k in range(terms.count):
        lw -= sq[k]
    return lw


def _systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.size
    positions = (rng.random() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights), positions)


def _iterate_once(
    xs: np.ndarray,
    ys: np.ndarray,
    terms: _Terms,
    rng: np.random.Generator,
    comm_radius: float,
    batch: bool,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """One reweight+resample round; returns (xs, ys, diverged)."""
    kernel = _log_weights_batch if batch else _log_weights_reference
    lw = kernel(xs, ys, terms)
    peak = float(lw.max())
    if peak < _LOG_UNDERFLOW:
        center = Position2D(float(xs.mean()), float(ys.mean()))
        fresh = uniform_cloud(center, comm_radius, xs.size, rng)
        return fresh.xs, fresh.ys, True
    w = np.exp(lw - peak)
    w /= w.sum()
    idx = _systematic_resample(w, rng)
    return xs[idx], ys[idx], False


@dataclass(frozen=True)
class SpawnStepResult:
    cloud: ParticleCloud
    message_ops: int
    divergences: int


def spawn_step(
    cloud: ParticleCloud,
    inbox: Inbox,
    l_max: int,
    rng: np.random.Generator,
    comm_radius: float = 600.0,
    batch: bool = True,
) -> SpawnStepResult:
    """Run l_max reweight/resample iterations against a frozen inbox.

    Weight underflow reinitializes the cloud uniformly over the communication
    disc around the current estimate and is reported as a divergence.
    """
    if l_max < 1:
        raise ValueError(f"l_max must be positive, got {l_max}")
    terms = _inbox_terms(inbox, inbox.peer_beliefs)
    if terms.count == 0:
        return SpawnStepResult(cloud=cloud, message_ops=0, divergences=0)
    xs, ys = cloud.xs, cloud.ys
    n = cloud.count
    divergences = 0
    for _ in range(l_max):
        xs, ys, diverged = _iterate_once(xs, ys, terms, rng, comm_radius, batch)
        divergences += diverged
    return SpawnStepResult(
        cloud=ParticleCloud(xs=xs, ys=ys, weights=np.full(n, 1.0 / n)),
        message_ops=terms.count * n * l_max,
        divergences=divergences,
    )


@dataclass(frozen=True)
class SpawnRuntime:
    """Per-agent state of the plain particle baseline."""

    node: NodeId
    cloud: ParticleCloud
    velocity_est: Velocity2D = Velocity2D(0.0, 0.0)
    message_ops: int = 0
    divergences: int = 0

    def estimate(self) -> Position2D:
        return self.cloud.mean_position()


def propagate_cloud(
    rt: SpawnRuntime, delta_t: float, jitter_std: float, rng: np.random.Generator
) -> ParticleCloud:
    """Shift by the finite-difference velocity estimate and add Gaussian jitter."""
    n = rt.cloud.count
    xs = rt.cloud.xs + rt.velocity_est.vx * delta_t + rng.normal(0.0, jitter_std, n)
    ys = rt.cloud.ys + rt.velocity_est.vy * delta_t + rng.normal(0.0, jitter_std, n)
    return ParticleCloud(xs=xs, ys=ys, weights=rt.cloud.weights)


class _SlotEngine:
    """Whole-network synchronous SPA iterations over one slot.

    All clouds live in (n_agents, n_particles) matrices so the per-iteration
    summary statistics, likelihood evaluation, and systematic resampling run
    as a handful of array passes. Per-agent generators are consumed in agent
    order exactly as the per-agent code path would, and the reference
    (per-particle) kernel can be routed through the same machinery, producing
    bit-identical log-weights.
    """

    def __init__(
        self,
        nodes: list[NodeId],
        clouds: dict[NodeId, Optional[tuple[np.ndarray, np.ndarray]]],
        inboxes: Mapping[NodeId, Inbox],
        fallback: list[Optional[PeerBelief]],
        rngs: list[np.random.Generator],
        particle_count: int,
        comm_radius: float,
    ) -> None:
        index_of = {node: i for i, node in enumerate(nodes)}
        self.m = len(nodes)
        self.n = particle_count
        self.comm_radius = comm_radius
        self.rngs = rngs
        self.active = np.zeros(self.m, dtype=bool)
        self.XS = np.zeros((self.m, self.n))
        self.YS = np.zeros((self.m, self.n))
        self.fallback = fallback
        self.ops = [0] * self.m
        self.divergences = [0] * self.m

        tx: list[float] = []
        ty: list[float] = []
        zs: list[float] = []
        i2v: list[float] = []
        peer_rows: list[int] = []
        peer_src: list[int] = []
        peer_base_var: list[float] = []
        bounds = [0]
        for i, node in enumerate(nodes):
            if clouds[node] is not None:
                xs, ys = clouds[node]
                self.XS[i] = xs
                self.YS[i] = ys
                self.active[i] = True
                inbox = inboxes[node]
                for pos, meas in inbox.anchor_obs:
                    tx.append(pos.x)
                    ty.append(pos.y)
                    zs.append(meas.value)
                    i2v.append(0.5 / meas.variance)
                for other, meas in inbox.agent_obs:
                    peer_rows.append(len(tx))
                    peer_src.append(index_of[other])
                    peer_base_var.append(meas.variance)
                    tx.append(0.0)
                    ty.append(0.0)
                    zs.append(meas.value)
                    i2v.append(0.0)
            bounds.append(len(tx))
        self.tx = np.asarray(tx)
        self.ty = np.asarray(ty)
        self.z = np.asarray(zs)
        self.i2v = np.asarray(i2v)
        self.peer_rows = np.asarray(peer_rows, dtype=np.intp)
        self.peer_src = np.asarray(peer_src, dtype=np.intp)
        self.peer_base_var = np.asarray(peer_base_var)
        self.bounds = bounds
        self._arange_n = np.arange(self.n)
        self._row_offsets = np.arange(self.m, dtype=float)[:, None]
        self._lw = np.zeros((self.m, self.n))
        # Per-agent scratch blocks keep the kernel inside cache-sized views.
        self._dx = [np.empty((bounds[i + 1] - bounds[i], self.n)) for i in range(self.m)]
        self._dy = [np.empty((bounds[i + 1] - bounds[i], self.n)) for i in range(self.m)]

    def _summaries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        means_x = self.XS.mean(axis=1)
        means_y = self.YS.mean(axis=1)
        ax = self.XS - means_x[:, None]
        ay = self.YS - means_y[:, None]
        vx = np.maximum(np.einsum("ij,ij->i", ax, ax) / self.n, _MIN_SUMMARY_VAR)
        vy = np.maximum(np.einsum("ij,ij->i", ay, ay) / self.n, _MIN_SUMMARY_VAR)
        spreads = 0.5 * (vx + vy)
        for i in range(self.m):
            if not self.active[i]:
                belief = self.fallback[i]
                if belief is None:
                    continue
                means_x[i] = belief.x.mean
                means_y[i] = belief.y.mean
                spreads[i] = 0.5 * (belief.x.variance + belief.y.variance)
        return means_x, means_y, spreads

    def _log_weight_matrix(self, batch: bool) -> np.ndarray:
        lw = self._lw
        if batch:
            for i in range(self.m):
                lo, hi = self.bounds[i], self.bounds[i + 1]
                if hi == lo:
                    lw[i] = 0.0
                    continue
                DX, DY = self._dx[i], self._dy[i]
                np.subtract(self.XS[i], self.tx[lo:hi, None], out=DX)
                DX *= DX
                np.subtract(self.YS[i], self.ty[lo:hi, None], out=DY)
                DY *= DY
                DX += DY
                np.sqrt(DX, out=DX)
                np.subtract(self.z[lo:hi, None], DX, out=DX)
                DX *= DX
                DX *= self.i2v[lo:hi, None]
                np.sum(DX, axis=0, out=lw[i])
                np.negative(lw[i], out=lw[i])
            return lw
        for i in range(self.m):
            lo, hi = self.bounds[i], self.bounds[i + 1]
            if hi > lo:
                terms = _Terms(
                    tx=self.tx[lo:hi],
                    ty=self.ty[lo:hi],
                    z=self.z[lo:hi],
                    inv_two_var=self.i2v[lo:hi],
                )
                lw[i] = _log_weights_reference(self.XS[i], self.YS[i], terms)
            else:
                lw[i] = 0.0
        return lw

    def _reinitialize_row(self, i: int) -> None:
        """Divergence recovery: fresh uniform cloud over the communication disc."""
        self.divergences[i] += 1
        rng = self.rngs[i]
        cx = float(self.XS[i].mean())
        cy = float(self.YS[i].mean())
        r = self.comm_radius * np.sqrt(rng.random(self.n))
        theta = rng.uniform(0.0, 2.0 * math.pi, self.n)
        self.XS[i] = cx + r * np.cos(theta)
        self.YS[i] = cy + r * np.sin(theta)

    def iterate(self, l_max: int, batch: bool) -> None:
        counts = np.diff(np.asarray(self.bounds))
        active_idx = [i for i in range(self.m) if counts[i] > 0]
        for i in active_idx:
            # Every iteration reweighs every (particle, neighbor) pair.
            self.ops[i] = int(counts[i]) * self.n * l_max
        for _ in range(l_max):
            means_x, means_y, spreads = self._summaries()
            if self.peer_rows.size:
                self.tx[self.peer_rows] = means_x[self.peer_src]
                self.ty[self.peer_rows] = means_y[self.peer_src]
                self.i2v[self.peer_rows] = 0.5 / (
                    self.peer_base_var + spreads[self.peer_src]
                )
            lw = self._log_weight_matrix(batch)
            peaks = lw.max(axis=1)
            us = np.zeros(self.m)
            resample = np.zeros(self.m, dtype=bool)
            for i in active_idx:
                if peaks[i] < _LOG_UNDERFLOW:
                    self._reinitialize_row(i)
                    lw[i] = 0.0  # keep the shared exp/normalize pass NaN-free
                    peaks[i] = 0.0
                    continue
                u = self.rngs[i].random()
                # u = 0 would make the copy counts total n + 1.
                us[i] = u if u > 0.0 else 0.5
                resample[i] = True
            if not resample.any():
                continue
            lw -= peaks[:, None]
            W = np.exp(lw, out=lw)
            cum = np.cumsum(W, axis=1, out=W)
            # Systematic resampling via per-particle copy counts: particle k is
            # drawn count_k = floor(n*cum_k/S - u) - floor(n*cum_{k-1}/S - u)
            # times, which totals exactly n once the last column is pinned.
            scale = self.n / cum[:, -1]
            cum *= scale[:, None]
            cum[:, -1] = float(self.n)
            np.subtract(cum, us[:, None], out=cum)
            np.floor(cum, out=cum)
            counts = np.diff(cum, axis=1, prepend=-1.0)
            rows = resample.nonzero()[0]
            flat_counts = counts[rows].astype(np.intp).ravel()
            src = np.repeat(
                (rows[:, None] * self.n + self._arange_n).ravel(), flat_counts
            )
            self.XS[rows] = self.XS.ravel()[src].reshape(rows.size, self.n)
            self.YS[rows] = self.YS.ravel()[src].reshape(rows.size, self.n)


def run_spawn_slot(
    runtimes: Mapping[NodeId, SpawnRuntime],
    inboxes: Mapping[NodeId, Inbox],
    l_max: int,
    delta_t: float,
    jitter_std: float,
    comm_radius: float,
    rngs: Mapping[NodeId, np.random.Generator],
    batch: bool = True,
    max_speed: float = math.inf,
) -> dict[NodeId, SpawnRuntime]:
    """Network-synchronous slot: per iteration every cloud sees the others'
    previous-iteration summaries. Inbox peer beliefs are ignored in favor of
    the live summaries.

    max_speed optionally clamps the finite-difference velocity estimate. The
    default leaves it unbounded, faithful to the filter-free baseline design:
    after a divergence re-initialization the estimate can slingshot the cloud,
    which is part of how this baseline fails under high mobility. Pass a
    physical bound to study the tempered variant."""
    nodes = sorted(runtimes)
    prev_means = {node: runtimes[node].estimate() for node in nodes}
    clouds: dict[NodeId, Optional[tuple[np.ndarray, np.ndarray]]] = {}
    particle_count = 0
    for node in nodes:
        cloud = propagate_cloud(runtimes[node], delta_t, jitter_std, rngs[node])
        clouds[node] = (cloud.xs, cloud.ys)
        particle_count = cloud.count
    engine = _SlotEngine(
        nodes,
        clouds,
        inboxes,
        [None] * len(nodes),
        [rngs[node] for node in nodes],
        particle_count,
        comm_radius,
    )
    engine.iterate(l_max, batch)
    out: dict[NodeId, SpawnRuntime] = {}
    for i, node in enumerate(nodes):
        n = engine.n
        cloud = ParticleCloud(
            xs=engine.XS[i].copy(), ys=engine.YS[i].copy(), weights=np.full(n, 1.0 / n)
        )
        new_mean = cloud.mean_position()
        old = prev_means[node]
        vx = (new_mean.x - old.x) / delta_t
        vy = (new_mean.y - old.y) / delta_t
        speed = math.hypot(vx, vy)
        if speed > max_speed:
            scale = max_speed / speed
            vx *= scale
            vy *= scale
        out[node] = SpawnRuntime(
            node=node,
            cloud=cloud,
            velocity_est=Velocity2D(vx, vy),
            message_ops=engine.ops[i],
            divergences=engine.divergences[i],
        )
    return out


@dataclass(frozen=True)
class SpaEkfRuntime:
    """Per-agent state of the EKF-wrapped particle variant."""

    node: NodeId
    belief: StateBelief
    message_ops: int = 0
    divergences: int = 0

    def estimate(self) -> Position2D:
        return self.belief.position()


def _refine_from_cloud(predicted: StateBelief, xs: np.ndarray, ys: np.ndarray) -> StateBelief:
    n = xs.size
    fused = ParticleCloud(xs=xs, ys=ys, weights=np.full(n, 1.0 / n)).summary()
    return ekf_update(
        predicted,
        PositionBelief(
            mean_x=fused.x.mean,
            mean_y=fused.y.mean,
            var_x=fused.x.variance,
            var_y=fused.y.variance,
        ),
    )


def spa_ekf_step(
    rt: SpaEkfRuntime,
    inbox: Inbox,
    model: TransitionModel,
    l_max: int,
    rng: np.random.Generator,
    particle_count: int = 500,
    comm_radius: float = 600.0,
    batch: bool = True,
) -> SpaEkfRuntime:
    """Predict, fuse ranges with a particle cloud, moment-match, refine.

    With an empty inbox this is exactly dead reckoning (the proposal cloud is
    never drawn, so the rng state advances only when fusion actually runs).
    """
    predicted = ekf_predict(rt.belief, model)
    if inbox.neighbor_count() == 0:
        return replace(rt, belief=predicted, message_ops=0, divergences=0)
    marg = predicted.position_marginals()
    cloud = gaussian_cloud(
        marg.x.mean,
        marg.y.mean,
        math.sqrt(marg.x.variance),
        math.sqrt(marg.y.variance),
        particle_count,
        rng,
    )
    result = spawn_step(cloud, inbox, l_max, rng, comm_radius=comm_radius, batch=batch)
    belief = _refine_from_cloud(predicted, result.cloud.xs, result.cloud.ys)
    return replace(
        rt,
        belief=belief,
        message_ops=result.message_ops,
        divergences=result.divergences,
    )


def run_spa_ekf_slot(
    runtimes: Mapping[NodeId, SpaEkfRuntime],
    inboxes: Mapping[NodeId, Inbox],
    model: TransitionModel,
    l_max: int,
    rngs: Mapping[NodeId, np.random.Generator],
    particle_count: int = 500,
    comm_radius: float = 600.0,
    batch: bool = True,
) -> dict[NodeId, SpaEkfRuntime]:
    """Network-synchronous slot for the EKF-wrapped variant.

    Clouds are proposed from each agent's predicted marginals, iterated with
    live summaries (neighbor-less agents broadcast their predicted marginals),
    then moment-matched back into each agent's filter.
    """
    nodes = sorted(runtimes)
    predicted: dict[NodeId, StateBelief] = {}
    clouds: dict[NodeId, Optional[tuple[np.ndarray, np.ndarray]]] = {}
    fallback: list[Optional[PeerBelief]] = []
    for node in nodes:
        pred = ekf_predict(runtimes[node].belief, model)
        predicted[node] = pred
        if inboxes[node].neighbor_count() == 0:
            clouds[node] = None
        else:
            marg = pred.position_marginals()
            cloud = gaussian_cloud(
                marg.x.mean,
                marg.y.mean,
                math.sqrt(marg.x.variance),
                math.sqrt(marg.y.variance),
                particle_count,
                rngs[node],
            )
            clouds[node] = (cloud.xs, cloud.ys)
        fallback.append(pred.position_marginals())
    engine = _SlotEngine(
        nodes,
        clouds,
        inboxes,
        fallback,
        [rngs[node] for node in nodes],
        particle_count,
        comm_radius,
    )
    engine.iterate(l_max, batch)
    out: dict[NodeId, SpaEkfRuntime] = {}
    for i, node in enumerate(nodes):
        if not engine.active[i]:
            out[node] = replace(
                runtimes[node], belief=predicted[node], message_ops=0, divergences=0
            )
            continue
        out[node] = SpaEkfRuntime(
            node=node,
            belief=_refine_from_cloud(predicted[node], engine.XS[i], engine.YS[i]),
            message_ops=engine.ops[i],
            divergences=engine.divergences[i],
        )
    return out
