"""Small-scale fields: the dynamic ODE closure and the static algebraic closure.

Small scales live at quadrature points only (one vector per point); the
element-interior integrals that feed back into the resolved equations never
need them anywhere else.  The dynamic model

    du'/dt + u'/tau_M + grad(zeta) + r_M = 0

is advanced pointwise with the same generalized-alpha parameters as the
resolved scales.  Because the update is affine in the forcing, solvers
condense it per point: u'_alpha = u'_free - s * (grad(zeta) + r_M), with the
scalar s and the history part u'_free provided by ``dynamic_update_coeffs``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SmallScaleField",
    "residual_momentum",
    "residual_continuity",
    "advance_dynamic",
    "dynamic_update_coeffs",
    "close_static",
]


@dataclass
class SmallScaleField:
    """Per-quadrature-point small-scale state.

    ``uprime`` and ``uprime_dot`` have shape (n_elements, n_qp, d).  The
    static pressure ``pprime`` (shape (n_elements, n_qp)) exists only for the
    static-closure formulation; the dynamic divergence-free model eliminates
    it.  ``tau`` stores the stabilization scale actually used by the last
    converged step so energy budgets can reuse it exactly.
    """

    uprime: np.ndarray
    uprime_dot: np.ndarray
    formulation: str
    pprime: np.ndarray | None = None
    tau: np.ndarray | None = None

    @classmethod
    def zeros(cls, n_elements: int, n_qp: int, dim: int, formulation: str) -> "SmallScaleField":
        shape = (n_elements, n_qp, dim)
        pprime = np.zeros((n_elements, n_qp)) if formulation == "vmss" else None
        return cls(
            uprime=np.zeros(shape),
            uprime_dot=np.zeros(shape),
            formulation=formulation,
            pprime=pprime,
            tau=None,
        )

    def copy(self) -> "SmallScaleField":
        return SmallScaleField(
            uprime=self.uprime.copy(),
            uprime_dot=self.uprime_dot.copy(),
            formulation=self.formulation,
            pprime=None if self.pprime is None else self.pprime.copy(),
            tau=None if self.tau is None else self.tau.copy(),
        )


def residual_momentum(udot, u, grad_u, lap_u, grad_p, uprime_adv, nu, f=None):
    """Pointwise strong momentum residual.

    r_M = du/dt + ((u + u') . grad) u + grad p - nu lap u - f, evaluated with
    the full advective velocity.  All inputs are arrays over points with the
    vector/tensor axes trailing: u (..., d), grad_u (..., d, d) with
    grad_u[..., i, j] = d_j u_i.
    """
    a = u + uprime_adv
    conv = np.einsum("...ij,...j->...i", grad_u, a)
    r = udot + conv + grad_p - nu * lap_u
    if f is not None:
        r = r - f
    return r


def residual_continuity(grad_u):
    """Pointwise continuity residual, the trace of the velocity gradient."""
    return np.trace(np.asarray(grad_u), axis1=-2, axis2=-1)


def dynamic_update_coeffs(tau, alpha_m: float, alpha_f: float, gamma: float, dt: float):
    """Coefficients of the condensed generalized-alpha small-scale update.

    Given frozen tau and the scale history (u'_n, u'dot_n), the alpha-level
    small scales are affine in the forcing g = grad(zeta) + r_M:

        u'_alpha = free_n * u'_n + free_dot * u'dot_n - s * g.

    Returns (s, free_n, free_dot) broadcastable over the tau array.
    """
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ValueError("tau must be positive")
    ct = alpha_m / (gamma * dt)
    c0 = (1.0 - alpha_m) - alpha_m * (1.0 - gamma) / gamma
    c2 = ct + alpha_f / tau
    s = alpha_f / c2
    free_n = (1.0 - alpha_f) + alpha_f * (ct - (1.0 - alpha_f) / tau) / c2
    free_dot = -alpha_f * c0 / c2
    return s, free_n, free_dot


def advance_dynamic(uprime_n, uprime_dot_n, forcing, tau, alpha_m: float,
                    alpha_f: float, gamma: float, dt: float):
    """One generalized-alpha step of the pointwise small-scale ODE.

    ``forcing`` is the alpha-level g = r_M + grad(zeta).  Returns
    (u'_{n+1}, u'dot_{n+1}).  The steady fixed point is u' = -tau * g.
    """
    tau = np.asarray(tau, dtype=float)[..., None]
    s, free_n, free_dot = dynamic_update_coeffs(tau, alpha_m, alpha_f, gamma, dt)
    uprime_alpha = free_n * uprime_n + free_dot * uprime_dot_n - s * np.asarray(forcing)
    uprime_new = (uprime_alpha - (1.0 - alpha_f) * uprime_n) / alpha_f
    uprime_dot_new = (uprime_new - uprime_n) / (gamma * dt) - (1.0 - gamma) / gamma * uprime_dot_n
    return uprime_new, uprime_dot_new


def close_static(r_m, r_c, tau_m, tau_c):
    """Static algebraic closure: u' = -tau_M r_M, p' = -tau_C r_C."""
    tau_m = np.asarray(tau_m, dtype=float)
    tau_c = np.asarray(tau_c, dtype=float)
    if np.any(tau_m <= 0) or np.any(tau_c <= 0):
        raise ValueError("stabilization scales must be positive")
    uprime = -tau_m[..., None] * np.asarray(r_m)
    pprime = -tau_c * np.asarray(r_c)
    return uprime, pprime
