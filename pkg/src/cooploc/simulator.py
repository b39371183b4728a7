"""Discrete-time world: anchor layout, agent mobility, sensing, respawn.

A single logical writer advances the world slot by slot; everything handed to
the estimators (`AgentSenses`) is immutable and can be consumed concurrently.

Scenario files are flat UTF-8 `key = value` text, one key per line, keys
exactly matching ScenarioConfig field names. Blank lines and `#` comments are
ignored; unknown keys are an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .core import (
    AgentTruth,
    InternalMeasurement,
    NodeId,
    Position2D,
    RangeMeasurement,
    Velocity2D,
    agent_id,
    anchor_id,
)

SPEED_NOISE_MODES = ("component", "magnitude")
TEMPORAL_SOURCES = ("refined", "fused")

# Variance floor so that a (nearly) stationary agent still yields a valid
# internal measurement record; the geometry guard downstream rejects it anyway.
_MIN_VARIANCE = 1e-12


@dataclass(frozen=True)
class ScenarioConfig:
    """Full experiment description. Field names double as scenario-file keys."""

    areaMin: float = 0.0
    areaMax: float = 3000.0
    agentAreaMin: float = 100.0
    agentAreaMax: float = 2900.0
    anchorCount: int = 13
    agentCount: int = 40
    commRadius: float = 600.0
    deltaT: float = 1.0
    initialSpeed: float = 50.0
    speedStd: float = 5.0
    rangeNoiseCoeff: float = 0.01
    internalNoiseCoeff: float = 0.01
    lMax: int = 30
    slots: int = 100
    mcRuns: int = 20
    seed: int = 1
    particleCount: int = 500
    # Extensions beyond the baseline key set, all defaulted and documented:
    speedNoiseMode: str = "component"   # per-component vs speed-magnitude noise
    temporalSource: str = "refined"     # previous posterior fed to the temporal factor
    priorPosStd: float = 10.0           # initial/respawn position prior std (0 = exact)
    priorVelStd: float = 100.0          # initial/respawn velocity prior std (0 = exact)

    def __post_init__(self) -> None:
        if not (self.areaMax > self.areaMin):
            raise ValueError("area bounds must satisfy areaMax > areaMin")
        if not (self.agentAreaMax > self.agentAreaMin):
            raise ValueError("agent area bounds must satisfy agentAreaMax > agentAreaMin")
        if self.agentAreaMin < self.areaMin or self.agentAreaMax > self.areaMax:
            raise ValueError("agent area must lie inside the full area")
        if self.anchorCount < 1 or self.agentCount < 1:
            raise ValueError("anchorCount and agentCount must be >= 1")
        if self.commRadius <= 0:
            raise ValueError("commRadius must be positive")
        if self.deltaT <= 0:
            raise ValueError("deltaT must be positive")
        if self.initialSpeed < 0 or self.speedStd < 0:
            raise ValueError("speeds must be non-negative")
        if self.rangeNoiseCoeff <= 0 or self.internalNoiseCoeff <= 0:
            raise ValueError("noise coefficients must be positive")
        if self.lMax < 1:
            raise ValueError("lMax must be >= 1")
        if self.slots < 0:
            raise ValueError("slots must be >= 0")
        if self.mcRuns < 1:
            raise ValueError("mcRuns must be >= 1")
        if self.particleCount < 2:
            raise ValueError("particleCount must be >= 2")
        if self.speedNoiseMode not in SPEED_NOISE_MODES:
            raise ValueError(f"speedNoiseMode must be one of {SPEED_NOISE_MODES}")
        if self.temporalSource not in TEMPORAL_SOURCES:
            raise ValueError(f"temporalSource must be one of {TEMPORAL_SOURCES}")
        if self.priorPosStd < 0 or self.priorVelStd < 0:
            raise ValueError("prior stds must be non-negative")


def load_scenario(path: str) -> ScenarioConfig:
    """Parse a scenario file; unknown keys raise ValueError."""
    typed = {f.name: f.type for f in fields(ScenarioConfig)}
    casts = {"int": int, "float": float, "str": str}
    values: dict[str, object] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in typed:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = casts[typed[key]](value.strip())
    return ScenarioConfig(**values)


def dump_scenario(cfg: ScenarioConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(ScenarioConfig):
            fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")


@dataclass(frozen=True)
class AgentSenses:
    """Measurements one agent collected in one slot (no estimator state)."""

    anchor_obs: tuple[tuple[Position2D, RangeMeasurement], ...]
    agent_obs: tuple[tuple[NodeId, RangeMeasurement], ...]
    internal: Optional[InternalMeasurement]
    clamped_ranges: int

    def neighbor_count(self) -> int:
        return len(self.anchor_obs) + len(self.agent_obs)


@dataclass
class WorldState:
    """Mutable-by-replacement world snapshot; rng advances in place."""

    slot: int
    anchors: tuple[Position2D, ...]
    agents: dict[NodeId, AgentTruth]
    rng: np.random.Generator
    prev_positions: Optional[dict[NodeId, Position2D]] = None
    respawned: frozenset[NodeId] = frozenset()


def anchor_layout(cfg: ScenarioConfig, rng: np.random.Generator) -> tuple[Position2D, ...]:
    """Fixed 13-point pattern over the area; extra anchors drawn uniformly.

    Order: 4 corners, 4 edge midpoints, 4 quarter-span inner points, center.
    With fewer than 13 requested, a prefix of that list is used.
    """
    lo, hi = cfg.areaMin, cfg.areaMax
    mid = 0.5 * (lo + hi)
    q1 = lo + 0.25 * (hi - lo)
    q3 = lo + 0.75 * (hi - lo)
    pattern = [
        (lo, lo), (hi, lo), (hi, hi), (lo, hi),
        (mid, lo), (hi, mid), (mid, hi), (lo, mid),
        (q1, q1), (q1, q3), (q3, q1), (q3, q3),
        (mid, mid),
    ]
    points = [Position2D(x, y) for x, y in pattern[: cfg.anchorCount]]
    while len(points) < cfg.anchorCount:
        points.append(Position2D(rng.uniform(lo, hi), rng.uniform(lo, hi)))
    return tuple(points)


def _spawn_agent(cfg: ScenarioConfig, rng: np.random.Generator) -> AgentTruth:
    x = rng.uniform(cfg.agentAreaMin, cfg.agentAreaMax)
    y = rng.uniform(cfg.agentAreaMin, cfg.agentAreaMax)
    heading = rng.uniform(0.0, 2.0 * math.pi)
    return AgentTruth(
        position=Position2D(x, y),
        velocity=Velocity2D(
            cfg.initialSpeed * math.cos(heading), cfg.initialSpeed * math.sin(heading)
        ),
    )


def init_world(cfg: ScenarioConfig, seed: Optional[int] = None) -> WorldState:
    """Place anchors and agents; deterministic for a given (cfg, seed)."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    anchors = anchor_layout(cfg, rng)
    agents = {agent_id(i): _spawn_agent(cfg, rng) for i in range(cfg.agentCount)}
    return WorldState(slot=0, anchors=anchors, agents=agents, rng=rng)


def step_mobility(world: WorldState, cfg: ScenarioConfig) -> WorldState:
    """Perturb velocities, move agents one slot, respawn any that left the area."""
    rng = world.rng
    new_agents: dict[NodeId, AgentTruth] = {}
    prev_positions: dict[NodeId, Position2D] = {}
    respawned: set[NodeId] = set()
    for node in sorted(world.agents):
        truth = world.agents[node]
        if cfg.speedNoiseMode == "component":
            vx = truth.velocity.vx + rng.normal(0.0, cfg.speedStd)
            vy = truth.velocity.vy + rng.normal(0.0, cfg.speedStd)
        else:
            speed = truth.velocity.speed()
            heading = math.atan2(truth.velocity.vy, truth.velocity.vx)
            speed = speed + rng.normal(0.0, cfg.speedStd)
            vx, vy = speed * math.cos(heading), speed * math.sin(heading)
        x = truth.position.x + vx * cfg.deltaT
        y = truth.position.y + vy * cfg.deltaT
        if cfg.areaMin <= x <= cfg.areaMax and cfg.areaMin <= y <= cfg.areaMax:
            new_agents[node] = AgentTruth(Position2D(x, y), Velocity2D(vx, vy))
            prev_positions[node] = truth.position
        else:
            new_agents[node] = _spawn_agent(cfg, rng)
            respawned.add(node)
    return WorldState(
        slot=world.slot + 1,
        anchors=world.anchors,
        agents=new_agents,
        rng=rng,
        prev_positions=prev_positions,
        respawned=frozenset(respawned),
    )


def sense(world: WorldState, cfg: ScenarioConfig) -> dict[NodeId, AgentSenses]:
    """Draw all range measurements for the current slot.

    Ranging variance grows linearly with true distance; negative draws are
    clamped to zero and counted. Internal measurements are absent for agents
    with no previous position (first slot, or respawned this slot). Per
    receiver, all link noises are drawn as one standard-normal batch.
    """
    rng = world.rng
    nodes = sorted(world.agents)
    ag_xy = np.array([[world.agents[n].position.x, world.agents[n].position.y] for n in nodes])
    an_xy = np.array([[p.x, p.y] for p in world.anchors])
    d_anchor = np.hypot(
        ag_xy[:, 0:1] - an_xy[None, :, 0], ag_xy[:, 1:2] - an_xy[None, :, 1]
    )
    d_agent = np.hypot(
        ag_xy[:, 0:1] - ag_xy[None, :, 0], ag_xy[:, 1:2] - ag_xy[None, :, 1]
    )

    out: dict[NodeId, AgentSenses] = {}
    for i, node in enumerate(nodes):
        anchor_idx = [k for k in range(len(world.anchors)) if d_anchor[i, k] <= cfg.commRadius]
        agent_idx = [j for j in range(len(nodes)) if j != i and d_agent[i, j] <= cfg.commRadius]
        draws = rng.standard_normal(len(anchor_idx) + len(agent_idx))
        clamped = 0
        anchor_obs: list[tuple[Position2D, RangeMeasurement]] = []
        for pos_in_draw, k in enumerate(anchor_idx):
            d = float(d_anchor[i, k])
            var = max(cfg.rangeNoiseCoeff * d, _MIN_VARIANCE)
            z = d + math.sqrt(var) * float(draws[pos_in_draw])
            if z < 0.0:
                z = 0.0
                clamped += 1
            anchor_obs.append(
                (world.anchors[k], RangeMeasurement(anchor_id(k), node, z, var))
            )
        agent_obs: list[tuple[NodeId, RangeMeasurement]] = []
        base = len(anchor_idx)
        for pos_in_draw, j in enumerate(agent_idx):
            d = float(d_agent[i, j])
            var = max(cfg.rangeNoiseCoeff * d, _MIN_VARIANCE)
            z = d + math.sqrt(var) * float(draws[base + pos_in_draw])
            if z < 0.0:
                z = 0.0
                clamped += 1
            agent_obs.append((nodes[j], RangeMeasurement(nodes[j], node, z, var)))
        internal: Optional[InternalMeasurement] = None
        if (
            world.prev_positions is not None
            and node in world.prev_positions
            and node not in world.respawned
        ):
            me = world.agents[node].position
            traveled = me.distance_to(world.prev_positions[node])
            var = max(cfg.internalNoiseCoeff * traveled, _MIN_VARIANCE)
            z = traveled + rng.normal(0.0, math.sqrt(var))
            if z < 0.0:
                z = 0.0
                clamped += 1
            internal = InternalMeasurement(agent=node, value=z, variance=var)
        out[node] = AgentSenses(
            anchor_obs=tuple(anchor_obs),
            agent_obs=tuple(agent_obs),
            internal=internal,
            clamped_ranges=clamped,
        )
    return out
