"""Shared domain types for the cooperative-positioning stack.

Everything here is an immutable value record. Operations elsewhere are pure
functions over these types, so per-agent work can run concurrently without
shared mutable state.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class NumericalFailure(RuntimeError):
    """Raised when a linear-algebra step degenerates (singular/ill-conditioned)."""


class Kind(enum.IntEnum):
    # Integer values make NodeIds orderable (anchors sort before agents).
    ANCHOR = 0
    AGENT = 1


@dataclass(frozen=True, slots=True, order=True)
class NodeId:
    """Identity of a network node. (kind, index) pairs are unique per scenario."""

    kind: Kind
    index: int

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError(f"node index must be non-negative, got {self.index}")

    def __hash__(self) -> int:
        # NodeIds key every per-agent map in the hot loops; avoid tuple hashing.
        return self.index << 1 | (self.kind is Kind.AGENT)

    def __str__(self) -> str:
        prefix = "A" if self.kind is Kind.ANCHOR else "U"
        return f"{prefix}{self.index}"


def anchor_id(index: int) -> NodeId:
    return NodeId(Kind.ANCHOR, index)


def agent_id(index: int) -> NodeId:
    return NodeId(Kind.AGENT, index)


@dataclass(frozen=True, slots=True)
class Position2D:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"position must be finite, got ({self.x}, {self.y})")

    def distance_to(self, other: "Position2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True, slots=True)
class Velocity2D:
    vx: float
    vy: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.vx) and math.isfinite(self.vy)):
            raise ValueError(f"velocity must be finite, got ({self.vx}, {self.vy})")

    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass(frozen=True, slots=True)
class AgentTruth:
    """Ground-truth kinematic state of one agent."""

    position: Position2D
    velocity: Velocity2D


@dataclass(frozen=True, slots=True)
class AxisGaussian:
    """1D Gaussian over a single position coordinate; the unit of all messages."""

    mean: float
    variance: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.mean):
            raise ValueError(f"mean must be finite, got {self.mean}")
        if not (self.variance > 0.0 and math.isfinite(self.variance)):
            raise ValueError(f"variance must be positive and finite, got {self.variance}")

    @property
    def precision(self) -> float:
        return 1.0 / self.variance


@dataclass(frozen=True, slots=True)
class PeerBelief:
    """Per-axis position belief, as broadcast between agents each iteration."""

    x: AxisGaussian
    y: AxisGaussian

    def mean_position(self) -> Position2D:
        return Position2D(self.x.mean, self.y.mean)


@dataclass(frozen=True, slots=True)
class PositionBelief:
    """Fused position estimate handed from data fusion to the refinement step."""

    mean_x: float
    mean_y: float
    var_x: float
    var_y: float

    def __post_init__(self) -> None:
        if not all(map(math.isfinite, (self.mean_x, self.mean_y, self.var_x, self.var_y))):
            raise ValueError("position belief must be finite")
        if self.var_x <= 0.0 or self.var_y <= 0.0:
            raise ValueError(f"variances must be positive, got ({self.var_x}, {self.var_y})")


@dataclass(frozen=True, slots=True)
class RangeMeasurement:
    """Noisy range from `sender` as observed by agent `receiver`."""

    sender: NodeId
    receiver: NodeId
    value: float
    variance: float

    def __post_init__(self) -> None:
        if self.receiver.kind is not Kind.AGENT:
            raise ValueError("range measurements are only received by agents")
        if self.value < 0.0 or not math.isfinite(self.value):
            raise ValueError(f"range must be non-negative and finite, got {self.value}")
        if not (self.variance > 0.0 and math.isfinite(self.variance)):
            raise ValueError(f"range variance must be positive, got {self.variance}")


@dataclass(frozen=True, slots=True)
class InternalMeasurement:
    """Distance the agent measured itself to have traveled over the last slot."""

    agent: NodeId
    value: float
    variance: float

    def __post_init__(self) -> None:
        if self.value < 0.0 or not math.isfinite(self.value):
            raise ValueError(f"traveled distance must be non-negative, got {self.value}")
        if not (self.variance > 0.0 and math.isfinite(self.variance)):
            raise ValueError(f"internal variance must be positive, got {self.variance}")


# Relative symmetry slack and eigenvalue slack for covariance validation.
_SYM_RTOL = 1e-9
_PSD_RTOL = 1e-9


def _as_readonly(a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if arr.shape != shape:
        raise ValueError(f"expected array of shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("array entries must be finite")
    arr.setflags(write=False)
    return arr


def _psd_within_slack(cov: np.ndarray, slack: float) -> bool:
    """Cheap Cholesky probe of cov + slack*I (sufficient for PSD-within-slack)."""
    c = [[float(cov[i, j]) for j in range(4)] for i in range(4)]
    for i in range(4):
        c[i][i] += slack
    for i in range(4):
        for j in range(i, 4):
            s = c[i][j] - sum(c[i][k] * c[j][k] for k in range(i))
            if i == j:
                if s <= 0.0:
                    return False
                c[i][i] = math.sqrt(s)
            else:
                c[j][i] = s / c[i][i]
    return True


@dataclass(frozen=True)
class StateBelief:
    """Gaussian state estimate: mean (x, y, vx, vy) and 4x4 covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", _as_readonly(self.mean, (4,)))
        cov = _as_readonly(self.cov, (4, 4))
        scale = float(np.abs(cov).max())
        if scale > 0.0 and float(np.abs(cov - cov.T).max()) > _SYM_RTOL * scale:
            raise ValueError("covariance is not symmetric within tolerance")
        slack = _PSD_RTOL * max(float(np.trace(cov)), 1.0)
        # Cholesky-with-slack is the fast sufficient check; fall back to the
        # spectrum only to produce an accurate verdict near the boundary.
        if not _psd_within_slack(cov, slack):
            eigmin = float(np.linalg.eigvalsh(cov).min())
            if eigmin < -slack:
                raise ValueError(f"covariance not PSD: min eigenvalue {eigmin}")
        object.__setattr__(self, "cov", cov)

    def position(self) -> Position2D:
        return Position2D(float(self.mean[0]), float(self.mean[1]))

    def velocity(self) -> Velocity2D:
        return Velocity2D(float(self.mean[2]), float(self.mean[3]))

    def position_marginals(self) -> PeerBelief:
        """Per-axis marginals of the position block."""
        return PeerBelief(
            x=AxisGaussian(float(self.mean[0]), float(self.cov[0, 0])),
            y=AxisGaussian(float(self.mean[1]), float(self.cov[1, 1])),
        )


@dataclass(frozen=True)
class TransitionModel:
    """Constant-velocity transition: block F = [[I, dt*I], [0, I]] plus noise Q."""

    delta_t: float
    F: np.ndarray = field(repr=False)
    Q: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.delta_t <= 0.0 or not math.isfinite(self.delta_t):
            raise ValueError(f"delta_t must be positive, got {self.delta_t}")
        F = _as_readonly(self.F, (4, 4))
        expected = np.eye(4)
        expected[0, 2] = expected[1, 3] = self.delta_t
        if not np.array_equal(F, expected):
            raise ValueError("F must have the exact constant-velocity block structure")
        Q = _as_readonly(self.Q, (4, 4))
        if float(np.abs(Q - Q.T).max()) > 0.0:
            raise ValueError("Q must be exactly symmetric")
        if float(np.linalg.eigvalsh(Q).min()) < -_PSD_RTOL * max(float(np.trace(Q)), 1.0):
            raise ValueError("Q must be positive semi-definite")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "Q", Q)
