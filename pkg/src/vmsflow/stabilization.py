"""Stabilization time scales for the momentum and continuity equations.

The dynamic momentum scale combines a convective and a viscous contribution
built from the element metric G of the reference-to-physical map,

    tau_M = (4 u.Gu + C_I nu^2 G:G)^(-1/2),      tau_C = (tau_M sqrt(G:G))^(-1),

evaluated with the full (resolved plus small-scale) velocity.  The static
variant used by the VMS method with static small-scales adds the transient
4/dt^2 term; the dynamic model carries its temporal behaviour in the
small-scale ODE instead and therefore has no dt term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ElementMetric

__all__ = ["StabilizationParams", "tau_M", "tau_C", "tau_M_static", "DEFAULT_C_I", "DEFAULT_TAU_MAX"]

DEFAULT_C_I = 36.0  # inverse-estimate constant for quadratic elements
DEFAULT_TAU_MAX = 1.0e6  # cap for the degenerate u = nu = 0 case, scaled by dt in solvers


@dataclass(frozen=True)
class StabilizationParams:
    """Bundle of stabilization inputs and the resulting scales at one point."""

    tau_M: float
    tau_C: float
    C_I: float
    nu: float


def tau_M(u_total, metric: ElementMetric, nu: float, C_I: float = DEFAULT_C_I,
          tau_max: float = DEFAULT_TAU_MAX):
    """Dynamic momentum stabilization scale.

    ``u_total`` is the full velocity (resolved plus small scales), either one
    vector or an array of vectors in the trailing axis.  Degenerate points
    with vanishing convective and viscous contributions return ``tau_max``.
    """
    if nu < 0:
        raise ValueError("viscosity must be nonnegative")
    u = np.asarray(u_total, dtype=float)
    single = u.ndim == 1
    u2 = np.atleast_2d(u)
    G = metric.G
    conv = 4.0 * np.einsum("...i,ij,...j->...", u2, G, u2)
    visc = C_I * nu * nu * metric.gg
    denom = conv + visc
    with np.errstate(divide="ignore"):
        tau = np.where(denom > 0.0, 1.0 / np.sqrt(np.maximum(denom, 1e-300)), tau_max)
    tau = np.minimum(tau, tau_max)
    return float(tau[0]) if single else tau


def tau_C(tau_m, metric: ElementMetric):
    """Continuity stabilization scale, tau_C = (tau_M sqrt(G:G))^(-1)."""
    tau_m = np.asarray(tau_m, dtype=float)
    if np.any(tau_m <= 0):
        raise ValueError("tau_M must be positive")
    out = 1.0 / (tau_m * np.sqrt(metric.gg))
    return float(out) if out.ndim == 0 else out


def tau_M_static(u_total, metric: ElementMetric, nu: float, dt: float,
                 C_I: float = DEFAULT_C_I):
    """Static momentum scale with the conventional transient 4/dt^2 term."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    u2 = np.atleast_2d(np.asarray(u_total, dtype=float))
    conv = 4.0 * np.einsum("...i,ij,...j->...", u2, metric.G, u2)
    visc = C_I * nu * nu * metric.gg
    tau = 1.0 / np.sqrt(4.0 / (dt * dt) + conv + visc)
    return float(tau[0]) if np.asarray(u_total).ndim == 1 else tau


def tau_fields(u_total, gg: float, G_diag: np.ndarray, nu: float,
               C_I: float = DEFAULT_C_I, tau_max: float = DEFAULT_TAU_MAX,
               dt_transient: float | None = None):
    """Vectorized tau_M over quadrature-point arrays with diagonal metric.

    ``u_total`` has shape (..., d) and ``G_diag`` the d diagonal entries of G.
    ``dt_transient`` switches to the static variant.  Used on the assembly
    fast path; semantics match :func:`tau_M` / :func:`tau_M_static`.
    """
    u = np.asarray(u_total, dtype=float)
    conv = 4.0 * np.einsum("...i,i->...", u * u, G_diag)
    denom = conv + C_I * nu * nu * gg
    if dt_transient is not None:
        denom = denom + 4.0 / (dt_transient * dt_transient)
    with np.errstate(divide="ignore"):
        tau = np.where(denom > 0.0, 1.0 / np.sqrt(np.maximum(denom, 1e-300)), tau_max)
    return np.minimum(tau, tau_max)
