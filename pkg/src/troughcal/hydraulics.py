"""Mass-flow allocation across the loops of a subfield.

Only the subfield volume flow is measured; per-loop flows are latent. They
are parameterized as a softmax over per-loop logits built from the average
loop temperature, two global affine coefficients and a learnable valve-state
vector, so that the ratios are positive and sum to one by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, NegativeFlow, NonFiniteInput

#: |V_dot| below this is treated as measurement noise around zero, m^3/s.
FLOW_NOISE_FLOOR = 1e-6


@dataclass(frozen=True)
class AllocationParams:
    """Global allocation coefficients: logits are (a*T_mu + b) * omega and
    the velocity scale is alpha = exp(log_alpha) (> 0 by construction)."""

    a: float = 0.0
    b: float = 1.0
    log_alpha: float = 0.0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))


@dataclass(frozen=True)
class ValveEra:
    """Maximal time span with unchanged valve settings; one omega vector of
    length n_loops per (subfield, era)."""

    era_id: int
    t_start: float
    t_end: float
    subfield_id: str


def allocation_logits(t_mu, omega, a, b):
    """Per-loop logits (a*T_mu + b) * omega; loop axis is axis 0."""
    t_mu = np.asarray(t_mu, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if t_mu.shape[0] != omega.shape[0]:
        raise LengthMismatch(
            f"T_mu has {t_mu.shape[0]} loops, omega has {omega.shape[0]}")
    if not (np.all(np.isfinite(t_mu)) and np.all(np.isfinite(omega))):
        raise NonFiniteInput("non-finite allocation input")
    om = omega if t_mu.ndim == 1 else omega[:, None]
    return (a * t_mu + b) * om


def softmax(logits, axis=0):
    """Overflow-safe softmax (max subtraction along the loop axis)."""
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(beta, g_beta, axis=0):
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    inner = np.sum(beta * g_beta, axis=axis, keepdims=True)
    return beta * (g_beta - inner)


def mass_flow_ratios(t_mu, omega, params: AllocationParams):
    """Per-loop mass-flow ratios beta (loop axis 0; positive, sum to 1).

    ``t_mu`` may be (n_loops,) for a single instant or (n_loops, n_steps).
    """
    return softmax(allocation_logits(t_mu, omega, params.a, params.b), axis=0)


def loop_velocity(beta_i, v_dot_h, t_header, t_local, alpha, a_f, props):
    """Loop fluid velocity from continuity, m/s.

    u = beta * (rho(T_header)/rho(T_local)) * alpha * V_dot / A_f.
    Negative measured flow within the noise floor clamps to zero.
    """
    v = clamp_flow(v_dot_h)
    return np.asarray(beta_i) * props.density_ratio(t_header, t_local) \
        * alpha * v / a_f


def clamp_flow(v_dot_h):
    """Clamp small negative flow readings to 0; larger negatives raise."""
    v = np.asarray(v_dot_h, dtype=float)
    if np.any(v < -FLOW_NOISE_FLOOR):
        raise NegativeFlow(
            f"volume flow {float(np.min(v)):g} m^3/s below -{FLOW_NOISE_FLOOR}")
    return np.maximum(v, 0.0)


def subfield_mass_flow(v_dot_h, t_header, props):
    """Subfield mass flow, kg/s: header density times volume flow."""
    return props.density(t_header) * clamp_flow(v_dot_h)
