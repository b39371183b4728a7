import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cooploc.core import (
    AxisGaussian,
    NumericalFailure,
    PeerBelief,
    Position2D,
    RangeMeasurement,
    agent_id,
    anchor_id,
)
from cooploc.messages import Axis, anchor_message
from cooploc.oracle import (
    QuadratureSpec,
    integrate_agent_message,
    integrate_anchor_message,
    trilaterate,
)


def rmeas(value, variance):
    return RangeMeasurement(anchor_id(0), agent_id(0), value, variance)


def test_spec_validation():
    with pytest.raises(ValueError):
        QuadratureSpec(bounds=((0.0, 1.0),), nodes=32)
    with pytest.raises(ValueError):
        QuadratureSpec(bounds=((1.0, 0.0),), nodes=64)
    spec = QuadratureSpec(bounds=((0.0, 2.0), (-1.0, 1.0)), nodes=64)
    assert spec.grid(0)[0] == 0.0 and spec.grid(0)[-1] == 2.0


def test_exact_mode_symmetric_geometry_self_consistency():
    anchor = Position2D(0.0, 0.0)
    truth = Position2D(100.0, 0.0)
    z = rmeas(100.0, 1.0)
    spec = QuadratureSpec(bounds=((94.0, 106.0), (-6.0, 6.0)), nodes=128)
    coarse = integrate_anchor_message(Axis.X, truth, anchor, z, spec, mode="exact")
    assert abs(coarse.mean - 100.0) < 0.5
    fine = integrate_anchor_message(
        Axis.X, truth, anchor, z, QuadratureSpec(spec.bounds, 256), mode="exact"
    )
    assert abs(fine.mean - coarse.mean) < 1e-3


def test_tp_mode_grid_convergence():
    anchor = Position2D(0.0, 0.0)
    lin = Position2D(100.0, 0.0)
    z = rmeas(100.0, 1.0)
    bounds = ((92.0, 108.0), (-4.0, 4.0))
    a = integrate_anchor_message(Axis.X, lin, anchor, z, QuadratureSpec(bounds, 128), "tp2")
    b = integrate_anchor_message(Axis.X, lin, anchor, z, QuadratureSpec(bounds, 256), "tp2")
    assert abs(a.mean - b.mean) / abs(b.mean) < 1e-4
    assert abs(a.variance - b.variance) / b.variance < 1e-4


@given(seed=st.integers(min_value=0, max_value=2**31))
@settings(max_examples=100)
def test_quadrature_halve_spacing_stability(seed):
    """Doubling the node count moves the reported moments by < 1e-3 relative."""
    rng = np.random.default_rng(seed)
    d = rng.uniform(100.0, 800.0)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    lin = Position2D(d * math.cos(theta), d * math.sin(theta))
    variance = 0.01 * d
    z = rmeas(d - rng.uniform(0.5, 3.0) * math.sqrt(variance), variance)
    msg = anchor_message(Axis.X, lin, Position2D(0.0, 0.0), z)
    if msg is None:
        return
    sx = math.sqrt(msg.variance)
    on = lin.x
    r_hat = d
    b_coef = (r_hat**3 - z.value * on * on) / r_hat**3
    sw = math.sqrt(variance / max(b_coef, 1e-9))
    drift = abs(z.value * on * lin.y / r_hat**3 / max(b_coef, 1e-9)) * 8 * sx
    bounds = (
        (msg.mean - 8 * sx, msg.mean + 8 * sx),
        (lin.y - (8 * sw + drift), lin.y + (8 * sw + drift)),
    )
    a = integrate_anchor_message(Axis.X, lin, Position2D(0, 0), z, QuadratureSpec(bounds, 192), "tp2")
    b = integrate_anchor_message(Axis.X, lin, Position2D(0, 0), z, QuadratureSpec(bounds, 384), "tp2")
    assert abs(a.mean - b.mean) <= 1e-3 * max(abs(b.mean), math.sqrt(b.variance))
    assert abs(a.variance - b.variance) / b.variance < 1e-3


def test_agent_mode_delta_limit_matches_anchor_mode():
    peer = PeerBelief(AxisGaussian(0.0, 1e-6), AxisGaussian(0.0, 1e-6))
    lin = Position2D(200.0, 80.0)
    d = lin.distance_to(Position2D(0.0, 0.0))
    z = RangeMeasurement(agent_id(1), agent_id(0), d - 2.0, 4.0)
    msg = anchor_message(Axis.X, lin, Position2D(0.0, 0.0), rmeas(d - 2.0, 4.0))
    sx = math.sqrt(msg.variance)
    agent_spec = QuadratureSpec(
        bounds=(
            (msg.mean - 8 * sx, msg.mean + 8 * sx),
            (lin.y - 120.0, lin.y + 120.0),
            (-0.01, 0.01),
            (-0.01, 0.01),
        ),
        nodes=64,
    )
    anchor_spec = QuadratureSpec(
        bounds=((msg.mean - 8 * sx, msg.mean + 8 * sx), (lin.y - 120.0, lin.y + 120.0)),
        nodes=256,
    )
    via_agent = integrate_agent_message(Axis.X, lin, peer, z, agent_spec, "tp2")
    via_anchor = integrate_anchor_message(
        Axis.X, lin, Position2D(0.0, 0.0), rmeas(d - 2.0, 4.0), anchor_spec, "tp2"
    )
    assert via_agent.mean == pytest.approx(via_anchor.mean, rel=1e-2)
    assert via_agent.variance == pytest.approx(via_anchor.variance, rel=1e-2)


def test_agent_mode_refinement_convergence():
    peer = PeerBelief(AxisGaussian(0.0, 25.0), AxisGaussian(0.0, 25.0))
    lin = Position2D(200.0, 0.0)
    z = RangeMeasurement(agent_id(1), agent_id(0), 197.0, 4.0)
    bounds = ((150.0, 250.0), (-45.0, 45.0), (-30.0, 30.0), (-30.0, 30.0))
    a = integrate_agent_message(Axis.X, lin, peer, z, QuadratureSpec(bounds, 64), "tp2")
    b = integrate_agent_message(Axis.X, lin, peer, z, QuadratureSpec(bounds, 128), "tp2")
    assert abs(a.mean - b.mean) / abs(b.mean) < 1e-3


def test_mass_underflow_raises_with_context():
    # Bounds far away from any integrand support drive the mass to zero.
    anchor = Position2D(0.0, 0.0)
    lin = Position2D(100.0, 0.0)
    z = rmeas(100.0, 0.01)
    spec = QuadratureSpec(bounds=((5000.0, 5100.0), (5000.0, 5100.0)), nodes=64)
    with pytest.raises(NumericalFailure):
        integrate_anchor_message(Axis.X, lin, anchor, z, spec, "exact")


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        integrate_anchor_message(
            Axis.X,
            Position2D(1.0, 0.0),
            Position2D(0.0, 0.0),
            rmeas(1.0, 1.0),
            QuadratureSpec(bounds=((0.0, 2.0), (-1.0, 1.0)), nodes=64),
            mode="cubic",
        )


# --- trilateration -----------------------------------------------------------


def test_trilaterate_exact_ranges_recover_truth():
    anchors = [Position2D(0.0, 0.0), Position2D(100.0, 0.0), Position2D(0.0, 100.0)]
    truth = Position2D(30.0, 40.0)
    ranges = [truth.distance_to(a) for a in anchors]
    fix = trilaterate(anchors, ranges, init=Position2D(10.0, 10.0))
    assert fix.x == pytest.approx(30.0, abs=1e-6)
    assert fix.y == pytest.approx(40.0, abs=1e-6)


def test_trilaterate_rejects_collinear_anchors():
    anchors = [Position2D(0.0, 0.0), Position2D(50.0, 0.0), Position2D(100.0, 0.0)]
    with pytest.raises(ValueError):
        trilaterate(anchors, [10.0, 20.0, 30.0], init=Position2D(1.0, 1.0))


def test_trilaterate_noisy_ranges_is_a_local_optimum():
    rng = np.random.default_rng(3)
    anchors = [
        Position2D(0.0, 0.0),
        Position2D(400.0, 0.0),
        Position2D(0.0, 400.0),
        Position2D(400.0, 400.0),
    ]
    truth = Position2D(130.0, 240.0)
    ranges = []
    for a in anchors:
        d = truth.distance_to(a)
        ranges.append(d + rng.normal(0.0, math.sqrt(0.01 * d)))

    def residual_norm(p: Position2D) -> float:
        return sum((p.distance_to(a) - z) ** 2 for a, z in zip(anchors, ranges))

    fix = trilaterate(anchors, ranges, init=truth)
    assert residual_norm(fix) <= residual_norm(truth) + 1e-9


def test_trilaterate_reports_non_convergence():
    anchors = [Position2D(0.0, 0.0), Position2D(100.0, 0.0), Position2D(0.0, 100.0)]
    ranges = [50.0, 50.0, 50.0]
    with pytest.raises(NumericalFailure):
        trilaterate(anchors, ranges, init=Position2D(30.0, 30.0), max_iterations=1)
