"""Prediction and refinement stages: linear-Gaussian bracketing of the data fusion.

The fused per-axis position belief acts as a pseudo-measurement of the position
block, observed through H = [I2 02]. The innovation covariance is always 2x2,
so it is inverted in closed form with a determinant guard.
"""

from __future__ import annotations

import numpy as np

from .core import NumericalFailure, PositionBelief, StateBelief, TransitionModel

# Condition-number ceiling for the 2x2 innovation covariance.
_MAX_CONDITION = 1e12


def make_transition_model(delta_t: float, sigma_v: float) -> TransitionModel:
    """Build the constant-velocity transition model for one slot of length delta_t.

    Process noise is a random walk in velocity with per-component std sigma_v;
    the position diagonal (sigma_v * delta_t)**2 / 4 absorbs discretization error.
    """
    if delta_t <= 0.0:
        raise ValueError(f"delta_t must be positive, got {delta_t}")
    if sigma_v < 0.0:
        raise ValueError(f"sigma_v must be non-negative, got {sigma_v}")
    F = np.eye(4)
    F[0, 2] = F[1, 3] = delta_t
    q_pos = (sigma_v * delta_t) ** 2 / 4.0
    Q = np.diag([q_pos, q_pos, sigma_v**2, sigma_v**2])
    return TransitionModel(delta_t=delta_t, F=F, Q=Q)


def ekf_predict(prev: StateBelief, model: TransitionModel) -> StateBelief:
    """Extrapolate mean and covariance one slot forward."""
    mean = model.F @ prev.mean
    cov = model.F @ prev.cov @ model.F.T + model.Q
    cov = 0.5 * (cov + cov.T)
    return StateBelief(mean=mean, cov=cov)


def ekf_update(prior: StateBelief, fused: PositionBelief) -> StateBelief:
    """Refine the predicted state with the fused position pseudo-measurement.

    With H = [I2 02] the gain reduces to K = P[:, :2] C^-1 and the non-Joseph
    covariance update to P - K C K^T = P - U C^-1 U^T with U = P[:, :2]; the
    result is re-symmetrized to suppress floating-point drift.
    """
    a = prior.cov[0, 0] + fused.var_x
    b = prior.cov[0, 1]
    c = prior.cov[1, 0]
    d = prior.cov[1, 1] + fused.var_y
    det = a * d - b * c
    norm = max(abs(a), abs(b), abs(c), abs(d))
    if det == 0.0 or norm * norm / abs(det) > _MAX_CONDITION:
        raise NumericalFailure(
            "innovation covariance is numerically singular: "
            f"C={[[a, b], [c, d]]}, prior position cov={prior.cov[:2, :2].tolist()}, "
            f"fused={fused}"
        )
    C_inv = np.array([[d, -b], [-c, a]]) / det

    U = prior.cov[:, :2]
    K = U @ C_inv
    residual = np.array(
        [fused.mean_x - prior.mean[0], fused.mean_y - prior.mean[1]]
    )
    mean = prior.mean + K @ residual
    cov = prior.cov - K @ U.T
    cov = 0.5 * (cov + cov.T)
    return StateBelief(mean=mean, cov=cov)
