"""Independent ground-truth engines used by tests and the `validate` command.

Nothing in the main pipeline imports this module. The quadrature routines
tabulate message integrands on tensor grids and moment-match the resulting
axis marginal; they never touch the closed-form coefficient algebra, so they
can adjudicate it.

Integrand modes:
  "tp2"   second-order Taylor approximation of the squared range residual
          around the linearization point (the approximant the closed forms
          integrate analytically),
  "tp1"   first-order-only variant, kept for comparison studies,
  "exact" the true nonlinear-norm likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (
    AxisGaussian,
    InternalMeasurement,
    NumericalFailure,
    PeerBelief,
    Position2D,
    RangeMeasurement,
)
from .messages import Axis

MODES = ("tp2", "tp1", "exact")


@dataclass(frozen=True)
class QuadratureSpec:
    """Tensor-grid description: one (lo, hi) interval per integration variable.

    For anchor messages the variables are (axis coordinate, other coordinate)
    of the receiving agent. For agent/temporal messages they are
    (axis_i, other_i, axis_peer, other_peer). `nodes` applies per axis.
    """

    bounds: tuple[tuple[float, float], ...]
    nodes: int

    def __post_init__(self) -> None:
        if self.nodes < 64:
            raise ValueError(f"need at least 64 nodes per axis, got {self.nodes}")
        for lo, hi in self.bounds:
            if not (math.isfinite(lo) and math.isfinite(hi) and hi > lo):
                raise ValueError(f"bad bounds ({lo}, {hi})")

    def grid(self, axis: int) -> np.ndarray:
        lo, hi = self.bounds[axis]
        return np.linspace(lo, hi, self.nodes)


def _swap_for_axis(axis: Axis, p: Position2D) -> tuple[float, float]:
    """Return (on-axis, off-axis) coordinates for the requested message axis."""
    if axis is Axis.X:
        return p.x, p.y
    return p.y, p.x


def _residual_tp_exponent(
    e1: float, e2: float, z: float, order: int
) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Taylor-approximated squared residual (z - ||e + d||)^2 as a function of d.

    e = (e1, e2) is the linearization offset from the source, d the displacement
    from the linearization point. Expansion uses the gradient (and, for order 2,
    the Hessian) of the Euclidean norm; the square is truncated at quadratic
    order, which is the approximant whose integral has a Gaussian closed form.
    """
    r_hat = math.hypot(e1, e2)
    if r_hat <= 0.0:
        raise ValueError("linearization point coincides with the source")
    delta = z - r_hat
    g1, g2 = e1 / r_hat, e2 / r_hat
    if order == 2:
        h11 = e2 * e2 / r_hat**3
        h22 = e1 * e1 / r_hat**3
        h12 = -e1 * e2 / r_hat**3
    else:
        h11 = h22 = h12 = 0.0
    m11 = g1 * g1 - delta * h11
    m22 = g2 * g2 - delta * h22
    m12 = g1 * g2 - delta * h12

    def squared_residual(d1: np.ndarray, d2: np.ndarray) -> np.ndarray:
        lin = g1 * d1 + g2 * d2
        quad = m11 * d1 * d1 + 2.0 * m12 * d1 * d2 + m22 * d2 * d2
        return delta * delta - 2.0 * delta * lin + quad

    return squared_residual


def anchor_integrand(
    axis: Axis,
    lin_point: Position2D,
    anchor_pos: Position2D,
    z: RangeMeasurement,
    mode: str = "tp2",
) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Unnormalized integrand of the anchor->agent message, on (on-axis, off-axis) grids."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    lin_on, lin_off = _swap_for_axis(axis, lin_point)
    src_on, src_off = _swap_for_axis(axis, anchor_pos)
    inv_two_var = 0.5 / z.variance

    if mode == "exact":

        def integrand(s: np.ndarray, t: np.ndarray) -> np.ndarray:
            dist = np.hypot(s - src_on, t - src_off)
            return np.exp(-((z.value - dist) ** 2) * inv_two_var)

        return integrand

    order = 2 if mode == "tp2" else 1
    sq_res = _residual_tp_exponent(lin_on - src_on, lin_off - src_off, z.value, order)

    def integrand(s: np.ndarray, t: np.ndarray) -> np.ndarray:
        return np.exp(-sq_res(s - lin_on, t - lin_off) * inv_two_var)

    return integrand


def _agent_factors(
    axis: Axis,
    lin_point_i: Position2D,
    peer: PeerBelief,
    z: RangeMeasurement | InternalMeasurement,
    mode: str,
) -> tuple[Callable[..., np.ndarray], Callable[..., np.ndarray]]:
    """Likelihood and peer-belief factors of the agent/temporal integrand."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    lin_on, lin_off = _swap_for_axis(axis, lin_point_i)
    if axis is Axis.X:
        peer_on, peer_off = peer.x, peer.y
    else:
        peer_on, peer_off = peer.y, peer.x
    inv_two_var = 0.5 / z.variance
    inv_two_s_on = 0.5 / peer_on.variance
    inv_two_s_off = 0.5 / peer_off.variance

    def belief_weight(s_j: np.ndarray, t_j: np.ndarray) -> np.ndarray:
        return np.exp(
            -((s_j - peer_on.mean) ** 2) * inv_two_s_on
            - ((t_j - peer_off.mean) ** 2) * inv_two_s_off
        )

    if mode == "exact":

        def likelihood(s_i, t_i, s_j, t_j):
            dist = np.hypot(s_i - s_j, t_i - t_j)
            return np.exp(-((z.value - dist) ** 2) * inv_two_var)

        return likelihood, belief_weight

    order = 2 if mode == "tp2" else 1
    e1 = lin_on - peer_on.mean
    e2 = lin_off - peer_off.mean
    sq_res = _residual_tp_exponent(e1, e2, z.value, order)

    def likelihood(s_i, t_i, s_j, t_j):
        d1 = (s_i - s_j) - e1
        d2 = (t_i - t_j) - e2
        return np.exp(-sq_res(d1, d2) * inv_two_var)

    return likelihood, belief_weight


def agent_integrand(
    axis: Axis,
    lin_point_i: Position2D,
    peer: PeerBelief,
    z: RangeMeasurement | InternalMeasurement,
    mode: str = "tp2",
) -> Callable[..., np.ndarray]:
    """Unnormalized integrand of the agent->agent (or temporal) message.

    Arguments of the returned callable: (s_i, t_i, s_j, t_j) broadcastable
    arrays in (on-axis, off-axis) coordinates of receiver and peer.
    """
    likelihood, belief_weight = _agent_factors(axis, lin_point_i, peer, z, mode)

    def integrand(s_i, t_i, s_j, t_j):
        return likelihood(s_i, t_i, s_j, t_j) * belief_weight(s_j, t_j)

    return integrand


def _moment_match(grid: np.ndarray, values: np.ndarray, context: str) -> AxisGaussian:
    mass = float(np.trapezoid(values, grid))
    if not math.isfinite(mass) or mass <= 1e-300:
        raise NumericalFailure(f"quadrature mass underflow ({context}): mass={mass}")
    mean = float(np.trapezoid(values * grid, grid)) / mass
    var = float(np.trapezoid(values * (grid - mean) ** 2, grid)) / mass
    if not (var > 0.0 and math.isfinite(var)):
        raise NumericalFailure(f"degenerate quadrature moments ({context}): var={var}")
    return AxisGaussian(mean=mean, variance=var)


def integrate_anchor_message(
    axis: Axis,
    lin_point: Position2D,
    anchor_pos: Position2D,
    z: RangeMeasurement,
    spec: QuadratureSpec,
    mode: str = "tp2",
) -> AxisGaussian:
    """Tabulate the anchor-message integrand and moment-match the axis marginal."""
    if len(spec.bounds) != 2:
        raise ValueError("anchor quadrature needs bounds for exactly 2 variables")
    f = anchor_integrand(axis, lin_point, anchor_pos, z, mode)
    s = spec.grid(0)
    t = spec.grid(1)
    table = f(s[:, None], t[None, :])
    marginal = np.trapezoid(table, t, axis=1)
    return _moment_match(s, marginal, f"anchor mode={mode} nodes={spec.nodes}")


def integrate_agent_message(
    axis: Axis,
    lin_point_i: Position2D,
    peer: PeerBelief,
    z: RangeMeasurement | InternalMeasurement,
    spec: QuadratureSpec,
    mode: str = "tp2",
) -> AxisGaussian:
    """Nested quadrature of the agent/temporal message (3 inner variables).

    The outer loop runs over the receiver's axis coordinate to keep the tensor
    memory bounded; the inner block integrates (other_i, axis_peer, other_peer).
    """
    if len(spec.bounds) != 4:
        raise ValueError("agent quadrature needs bounds for exactly 4 variables")
    likelihood, belief_weight = _agent_factors(axis, lin_point_i, peer, z, mode)
    s_i = spec.grid(0)
    t_i = spec.grid(1)[:, None, None]
    s_j = spec.grid(2)[None, :, None]
    t_j = spec.grid(3)[None, None, :]
    # The belief factor is independent of the outer variable; tabulate it once.
    weights = belief_weight(s_j, t_j)

    marginal = np.empty_like(s_i)
    for k, s_val in enumerate(s_i):
        block = likelihood(s_val, t_i, s_j, t_j) * weights
        block = np.trapezoid(block, spec.grid(3), axis=2)
        block = np.trapezoid(block, spec.grid(2), axis=1)
        marginal[k] = np.trapezoid(block, spec.grid(1), axis=0)
    return _moment_match(s_i, marginal, f"agent mode={mode} nodes={spec.nodes}")


def trilaterate(
    anchors: Sequence[Position2D],
    ranges: Sequence[float],
    init: Position2D,
    max_iterations: int = 100,
    step_tolerance: float = 1e-9,
) -> Position2D:
    """Gauss-Newton least-squares fix from anchor ranges.

    Requires at least three non-collinear anchors; raises NumericalFailure if
    the step has not shrunk below the tolerance after max_iterations.
    """
    if len(anchors) < 3 or len(anchors) != len(ranges):
        raise ValueError("need >= 3 anchors with one range each")
    pts = np.array([[a.x, a.y] for a in anchors])
    span = pts - pts[0]
    cross = np.abs(span[:, 0, None] * span[None, :, 1] - span[:, 1, None] * span[None, :, 0])
    scale = float(np.abs(span).max()) or 1.0
    if float(cross.max()) <= 1e-9 * scale * scale:
        raise ValueError("anchors are collinear; the fix is rank-deficient")

    zs = np.asarray(ranges, dtype=float)
    x = np.array([init.x, init.y])
    for _ in range(max_iterations):
        diff = x[None, :] - pts
        dists = np.hypot(diff[:, 0], diff[:, 1])
        dists = np.maximum(dists, 1e-12)
        residuals = dists - zs
        J = diff / dists[:, None]
        JtJ = J.T @ J
        det = JtJ[0, 0] * JtJ[1, 1] - JtJ[0, 1] * JtJ[1, 0]
        if abs(det) < 1e-12 * max(JtJ[0, 0] * JtJ[1, 1], 1e-12):
            raise NumericalFailure(f"normal matrix singular at {x.tolist()}")
        rhs = J.T @ residuals
        step = np.array(
            [
                (-JtJ[1, 1] * rhs[0] + JtJ[0, 1] * rhs[1]) / det,
                (JtJ[1, 0] * rhs[0] - JtJ[0, 0] * rhs[1]) / det,
            ]
        )
        x = x + step
        if float(np.hypot(step[0], step[1])) < step_tolerance:
            return Position2D(float(x[0]), float(x[1]))
    raise NumericalFailure(
        f"trilateration did not converge in {max_iterations} iterations (at {x.tolist()})"
    )


def dense_predict(
    mean: np.ndarray, cov: np.ndarray, F: np.ndarray, Q: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Reference prediction in extended precision (straight dense evaluation)."""
    mean_l = np.asarray(mean, dtype=np.longdouble)
    cov_l = np.asarray(cov, dtype=np.longdouble)
    F_l = np.asarray(F, dtype=np.longdouble)
    Q_l = np.asarray(Q, dtype=np.longdouble)
    return F_l @ mean_l, F_l @ cov_l @ F_l.T + Q_l


def dense_update(
    mean: np.ndarray, cov: np.ndarray, m: np.ndarray, R: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Reference refinement in extended precision with H = [I2 02]."""
    mean_l = np.asarray(mean, dtype=np.longdouble)
    cov_l = np.asarray(cov, dtype=np.longdouble)
    H = np.zeros((2, 4), dtype=np.longdouble)
    H[0, 0] = H[1, 1] = 1.0
    m_l = np.asarray(m, dtype=np.longdouble)
    R_l = np.asarray(R, dtype=np.longdouble)

    residual = m_l - H @ mean_l
    C = H @ cov_l @ H.T + R_l
    det = C[0, 0] * C[1, 1] - C[0, 1] * C[1, 0]
    C_inv = np.array([[C[1, 1], -C[0, 1]], [-C[1, 0], C[0, 0]]], dtype=np.longdouble) / det
    K = cov_l @ H.T @ C_inv
    new_mean = mean_l + K @ residual
    new_cov = cov_l - K @ C @ K.T
    return new_mean, new_cov
