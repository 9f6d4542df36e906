"""Generalized-alpha time stepping with predictor/multicorrector nonlinear iteration.

The resolved unknowns of a step are (u_{n+1}, stage pressure, stage
multiplier); rates follow from the Newmark relation
u_{n+1} = u_n + dt ((1-gamma) udot_n + gamma udot_{n+1}).  Every spatial term
is evaluated at the n+alpha_f level and every rate at n+alpha_m, the dynamic
small scales are advanced pointwise with the same parameters, and the
quadrature energy budget of the converged step is recorded so the discrete
energy identity can be checked term by term.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import solver as _solver
from .diagnostics import (
    EnergyBudget,
    compute_budget,
    divergence_report,
    smallscale_orthogonality,
    state_energies,
    step_transfer_terms,
    total_momentum,
)
from .formulations import Assembler, StageData
from .geometry import element_metric
from .small_scales import SmallScaleField, dynamic_update_coeffs, close_static
from .stabilization import tau_fields

__all__ = ["AlphaParams", "State", "StepError", "StepReport", "step", "run", "solve_steady_stokes", "SolverOptions"]


class StepError(RuntimeError):
    """Nonlinear non-convergence; the step is aborted, not silently continued."""


@dataclass(frozen=True)
class AlphaParams:
    """Generalized-alpha coefficients; (1/2, 1/2, 1/2) is the midpoint-type scheme."""

    dt: float
    alpha_m: float = 0.5
    alpha_f: float = 0.5
    gamma: float = 0.5

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name in ("alpha_m", "alpha_f", "gamma"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")

    @property
    def ct(self) -> float:
        """d(udot_{n+alpha_m}) / d(u_{n+1})."""
        return self.alpha_m / (self.gamma * self.dt)


@dataclass
class State:
    """Coefficient arrays of the resolved unknowns plus time bookkeeping."""

    u: np.ndarray
    udot: np.ndarray
    p: np.ndarray
    z: np.ndarray
    t: float = 0.0
    step: int = 0

    @classmethod
    def zeros(cls, assembler: Assembler) -> "State":
        d = assembler.d
        nv = assembler.space.velocity[0].n_dofs
        nq = assembler.space.pressure.n_dofs
        return cls(u=np.zeros((d, nv)), udot=np.zeros((d, nv)),
                   p=np.zeros(nq), z=np.zeros(nq))

    def copy(self) -> "State":
        return State(u=self.u.copy(), udot=self.udot.copy(), p=self.p.copy(),
                     z=self.z.copy(), t=self.t, step=self.step)


@dataclass
class SolverOptions:
    nonlinear_rtol: float = 1e-3
    nonlinear_atol: float = 1e-12
    min_correctors: int = 3
    max_correctors: int = 40
    linear_tol: float = 1e-10
    linear_max_iter: int = 500
    linear_restart: int = 100
    preconditioner: str = "asm"
    schwarz_group: int = 2
    C_I: float = 36.0
    tau_max_factor: float = 1.0e6  # cap is tau_max_factor * dt
    linearization: str = "newton"
    divergence_tol: float = 1e-9


@dataclass
class StepReport:
    converged: bool
    n_passes: int
    residual0: float
    residual: float
    linear_iterations: int
    n_jacobians: int
    budget: EnergyBudget
    wall_time: float = 0.0


def _metric_arrays(assembler: Assembler):
    metric = element_metric(assembler.space.domain)
    return np.diag(metric.G).copy(), metric.gg


def _forcing_at(assembler: Assembler, forcing, t: float):
    if forcing is None:
        return None
    pts = assembler.qp_points
    f = np.asarray(forcing(pts.reshape(-1, assembler.d), t), dtype=float)
    return f.reshape(pts.shape)


def _schwarz_blocks(assembler: Assembler, group: int):
    key = ("_schwarz_cache", group)
    cached = getattr(assembler, "_schwarz_cache", None)
    if cached is not None and cached[0] == group:
        return cached[1]
    blocks = _solver.element_block_indices(
        assembler.conn_offsets(), assembler.space.domain.n_elements, group=group
    )
    assembler._schwarz_cache = (group, blocks)
    return blocks


def _make_preconditioner(assembler: Assembler, matrix, opts: SolverOptions):
    if opts.preconditioner == "asm":
        return _solver.BlockJacobiASM(matrix, blocks=_schwarz_blocks(assembler, opts.schwarz_group))
    return _solver.build_preconditioner(matrix, opts.preconditioner)


def step(assembler: Assembler, state: State, small: SmallScaleField,
         params: AlphaParams, opts: SolverOptions | None = None, forcing=None):
    """Advance one generalized-alpha step; returns (state, small scales, report).

    The corrector loop interleaves the small-scale update (lagged Picard
    coupling) with resolved-scale Newton/Picard corrections until the residual
    with freshly updated small scales meets the tolerance.
    """
    opts = opts or SolverOptions()
    t_start = time.perf_counter()
    am, af, g, dt = params.alpha_m, params.alpha_f, params.gamma, params.dt
    ct = params.ct
    form = assembler.formulation
    d = assembler.d
    E, Q = assembler.E, assembler.Q
    nu = assembler.nu
    G_diag, gg = _metric_arrays(assembler)
    tau_cap = opts.tau_max_factor * dt

    f_alpha = _forcing_at(assembler, forcing, state.t + af * dt)

    e_h0, e_cross0, e_prime0 = state_energies(assembler, state.u, small)

    # same-displacement predictor
    u_new = state.u.copy()
    udot_pred = ((g - 1.0) / g) * state.udot
    p_stage = state.p.copy()
    z_stage = state.z.copy()

    uprime_lag = small.uprime.copy()  # alpha-level lag under the same-value predictor
    adv_frozen_mode = opts.linearization == "picard"

    matrix = None
    precond = None
    null = assembler.layout.null_vectors()
    lin_iters = 0
    n_jacobians = 0
    r0 = None
    rnorm = np.inf
    rnorm_prev = None
    work = None
    stage = None
    tau = None
    converged = False

    for k in range(opts.max_correctors + 1):
        u_alpha = state.u + af * (u_new - state.u)
        udot_new = state.udot + (u_new - state.u - dt * state.udot) / (g * dt)
        udot_am = state.udot + am * (udot_new - state.udot)

        u_alpha_qp = assembler.velocity_values(u_alpha)
        total_vel = u_alpha_qp + uprime_lag
        stage_kw = dict(ct=ct, alpha_f=af, f_qp=f_alpha, include_convection=True)
        if adv_frozen_mode:
            stage_kw["adv_frozen"] = total_vel

        if form == "glsdd":
            tau = tau_fields(total_vel, gg, G_diag, nu, opts.C_I, tau_cap)
            s, fn, fd = dynamic_update_coeffs(tau, am, af, g, dt)
            uprime_free = fn[:, :, None] * small.uprime + fd[:, :, None] * small.uprime_dot
            stage = StageData(u_alpha=u_alpha, udot_am=udot_am, p=p_stage, z=z_stage,
                              uprime_free=uprime_free, s=s, tau=tau,
                              uprime_lag=uprime_lag, **stage_kw)
        elif form == "vmss":
            tau = tau_fields(total_vel, gg, G_diag, nu, opts.C_I, tau_cap, dt_transient=dt)
            tau_c = 1.0 / (tau * np.sqrt(gg))
            uq, gradq, lapq, divq = assembler.velocity_fields(u_alpha)
            udq = assembler.velocity_values(udot_am)
            gradp = assembler.space.pressure.qp_gradients(p_stage)
            conv = np.einsum("eqij,eqj->eqi", gradq, uq + uprime_lag)
            r_m = udq + conv + gradp - nu * lapq
            if f_alpha is not None:
                r_m = r_m - f_alpha
            ups, pps = close_static(r_m, divq, tau, tau_c)
            stage = StageData(u_alpha=u_alpha, udot_am=udot_am, p=p_stage, z=None,
                              uprime_static=ups, pprime_static=pps, tau=tau,
                              uprime_lag=uprime_lag, **stage_kw)
        else:
            stage = StageData(u_alpha=u_alpha, udot_am=udot_am, p=p_stage, z=None,
                              uprime_lag=None, **stage_kw)

        R, work = assembler.residual(stage)
        rnorm = float(np.linalg.norm(R))
        if r0 is None:
            r0 = rnorm
        target = max(opts.nonlinear_rtol * r0, opts.nonlinear_atol)
        if rnorm <= target and (k >= opts.min_correctors or rnorm <= opts.nonlinear_atol):
            converged = True
            break
        if k == opts.max_correctors:
            break

        # next pass advects with the small scales just evaluated
        if form == "glsdd":
            uprime_lag = work.uprime
        elif form == "vmss":
            uprime_lag = stage.uprime_static

        rebuild = matrix is None or (
            rnorm_prev is not None and rnorm > 0.3 * rnorm_prev and n_jacobians < 6
        )
        if rebuild:
            matrix = assembler.jacobian(stage, work)
            precond = _make_preconditioner(assembler, matrix, opts)
            n_jacobians += 1
        rnorm_prev = rnorm

        eta = min(1e-2, 0.01 * target / rnorm) if rnorm > 0 else opts.linear_tol
        eta = max(eta, opts.linear_tol)
        result = _solver.solve(matrix, -R, tol=eta, max_iter=opts.linear_max_iter,
                               restart=opts.linear_restart, preconditioner=precond,
                               null_vectors=null)
        lin_iters += result.iterations
        if not result.converged and result.residual > 1e-2:
            raise StepError(
                f"linear solver stalled at step {state.step + 1}, pass {k}: "
                f"relative residual {result.residual:.3e}"
            )
        dx = result.x
        off = 0
        nv = assembler.space.velocity[0].n_dofs
        for c in range(d):
            u_new[c] += dx[off : off + nv]
            off += nv
        nq = assembler.space.pressure.n_dofs
        p_stage += dx[off : off + nq]
        off += nq
        if form == "glsdd":
            z_stage += dx[off : off + nq]

    if not converged:
        raise StepError(
            f"nonlinear iteration did not converge at step {state.step + 1}: "
            f"residual {rnorm:.3e} after {opts.max_correctors} correctors "
            f"(started at {r0:.3e})"
        )

    udot_new = state.udot + (u_new - state.u - dt * state.udot) / (g * dt)
    new_state = State(u=u_new, udot=udot_new, p=p_stage.copy(), z=z_stage.copy(),
                      t=state.t + dt, step=state.step + 1)

    # finalize small scales from the converged pass
    if form == "glsdd":
        uprime_alpha = work.uprime
        uprime_new = (uprime_alpha - (1.0 - af) * small.uprime) / af
        uprime_dot_new = (uprime_new - small.uprime) / (g * dt) \
            - (1.0 - g) / g * small.uprime_dot
        new_small = SmallScaleField(uprime=uprime_new, uprime_dot=uprime_dot_new,
                                    formulation=form, pprime=None, tau=tau.copy())
    elif form == "vmss":
        new_small = SmallScaleField(uprime=stage.uprime_static.copy(),
                                    uprime_dot=np.zeros_like(stage.uprime_static),
                                    formulation=form, pprime=stage.pprime_static.copy(),
                                    tau=tau.copy())
    else:
        new_small = small

    budget = _step_budget(assembler, params, state, new_state, small, new_small,
                          work, stage, tau, f_alpha, (e_h0, e_cross0, e_prime0))
    report = StepReport(converged=True, n_passes=k, residual0=r0, residual=rnorm,
                        linear_iterations=lin_iters, n_jacobians=n_jacobians,
                        budget=budget, wall_time=time.perf_counter() - t_start)
    return new_state, new_small, report


def _step_budget(assembler, params, old_state, new_state, old_small, new_small,
                 work, stage, tau, f_alpha, energies0) -> EnergyBudget:
    form = assembler.formulation
    wq = assembler.wq
    dt, af, am, g = params.dt, params.alpha_f, params.alpha_m, params.gamma

    e_h0, e_cross0, e_prime0 = energies0
    e_h1, e_cross1, e_prime1 = state_energies(assembler, new_state.u, new_small)

    terms = step_transfer_terms(assembler, work, tau, f_alpha)
    d_visc = terms["D_visc"]
    d_small = terms["D_small"]
    div_max, div_l2 = divergence_report(assembler, new_state.u)

    udot_am = old_state.udot + am * (new_state.udot - old_state.udot)
    udot_qp = assembler.velocity_values(udot_am)
    if form == "glsdd" and work.uprime_dot_am is not None:
        udot_tot = udot_qp + work.uprime_dot_am
    else:
        udot_tot = udot_qp
    udot_norm2 = float(np.einsum("q,eqi,eqi->", wq, udot_tot, udot_tot))
    alpha_term = dt * dt * (af - 0.5) * udot_norm2

    w_sum = terms["W_force_h"] + terms["W_force_prime"]
    if form == "glsdd":
        dE = (e_h1 + e_cross1 + e_prime1) - (e_h0 + e_cross0 + e_prime0)
        rhs = -terms["D_visc_assembled"] - d_small + w_sum
        identity_error = dE + alpha_term - dt * rhs
        scale = max(e_h0 + e_cross0 + e_prime0, 1.0)
    elif form == "vmss":
        udot_h_norm2 = float(np.einsum("q,eqi,eqi->", wq, udot_qp, udot_qp))
        dE = e_h1 - e_h0
        rhs = (-terms["D_visc_assembled"] - d_small + 2.0 * terms["T_laplace"]
               - terms["T_udot_small"] - terms["T_backscatter"] + terms["T_gradconv"]
               + terms["T_pressure_small"] + w_sum)
        identity_error = dE + dt * dt * (af - 0.5) * udot_h_norm2 - dt * rhs
        scale = max(e_h0, 1.0)
    else:
        dE = e_h1 - e_h0
        rhs = -terms["D_visc_assembled"] + terms["W_force_h"]
        identity_error = dE + alpha_term - dt * rhs
        scale = max(e_h0, 1.0)

    denom = d_visc + d_small
    unwanted = (2.0 * terms["T_laplace"] - terms["T_udot_small"] - terms["T_backscatter"]
                + terms["T_gradconv"] + terms["T_pressure_small"]) if form == "vmss" else 0.0
    orth = smallscale_orthogonality(assembler, new_small) if form == "glsdd" else 0.0
    return EnergyBudget(
        t=new_state.t, step=new_state.step,
        E_h=e_h1, E_prime=e_prime1, E_cross=e_cross1,
        E_total=e_h1 + e_cross1 + e_prime1,
        D_visc=d_visc, D_visc_assembled=terms["D_visc_assembled"], D_small=d_small,
        fraction=d_small / denom if denom > 0 else 0.0,
        W_force_h=terms["W_force_h"], W_force_prime=terms["W_force_prime"],
        T_laplace=terms["T_laplace"], T_pressure_small=terms["T_pressure_small"],
        T_backscatter=terms["T_backscatter"], T_udot_small=terms["T_udot_small"],
        T_gradconv=terms["T_gradconv"], unwanted_sum=unwanted,
        div_max=div_max, div_l2=div_l2, orth_defect=orth,
        momentum=total_momentum(assembler, new_state.u, new_small),
        identity_error=identity_error, identity_scale=scale,
    )


def run(assembler: Assembler, state: State, params: AlphaParams, t_end: float,
        opts: SolverOptions | None = None, forcing=None,
        small: SmallScaleField | None = None, on_step=None, checkpoint_every=None,
        on_checkpoint=None):
    """Step from the state's time to t_end, emitting one budget row per step.

    ``on_step(state, small, report)`` runs after every converged step; step
    aborts propagate to the caller.  Returns (state, small, records).
    """
    opts = opts or SolverOptions()
    if small is None:
        small = SmallScaleField.zeros(assembler.E, assembler.Q, assembler.d,
                                      assembler.formulation)
    records = []
    n_steps = int(round((t_end - state.t) / params.dt))
    for _ in range(max(n_steps, 0)):
        state, small, report = step(assembler, state, small, params, opts, forcing)
        records.append(report.budget)
        if on_step is not None:
            on_step(state, small, report)
        if checkpoint_every and state.step % checkpoint_every == 0 and on_checkpoint:
            on_checkpoint(state, small)
    return state, small, records


def solve_steady_stokes(assembler: Assembler, f_qp: np.ndarray,
                        opts: SolverOptions | None = None):
    """Steady Stokes solve (no time terms, convection disabled).

    For the dynamic divergence-free formulation the small scales sit at their
    ODE equilibrium u' = -tau (grad zeta + r_M); the condensation scale is
    then tau itself and the substituted small-scale rate vanishes identically
    at the solution.
    """
    opts = opts or SolverOptions()
    E, Q, d = assembler.E, assembler.Q, assembler.d
    G_diag, gg = _metric_arrays(assembler)
    nu = assembler.nu
    form = assembler.formulation
    zeros_u = np.zeros((d, assembler.space.velocity[0].n_dofs))
    nq = assembler.space.pressure.n_dofs
    kw = dict(ct=0.0, alpha_f=1.0, include_convection=False, f_qp=f_qp)
    if form == "glsdd":
        tau = tau_fields(np.zeros((E, Q, d)), gg, G_diag, nu, opts.C_I,
                         opts.tau_max_factor)
        stage = StageData(u_alpha=zeros_u, udot_am=None, p=np.zeros(nq),
                          z=np.zeros(nq), uprime_free=np.zeros((E, Q, d)),
                          s=tau, tau=tau, uprime_lag=np.zeros((E, Q, d)), **kw)
    elif form == "vmss":
        raise ValueError("steady Stokes mode is provided for galerkin and glsdd")
    else:
        stage = StageData(u_alpha=zeros_u, udot_am=None, p=np.zeros(nq), z=None,
                          uprime_lag=None, **kw)

    out = assembler.assemble(stage, want_matrix=True)
    precond = _make_preconditioner(assembler, out.matrix, opts)
    result = _solver.solve(out.matrix, -out.residual, tol=opts.linear_tol,
                           max_iter=opts.linear_max_iter, restart=opts.linear_restart,
                           preconditioner=precond,
                           null_vectors=assembler.layout.null_vectors(velocity_constants=True))
    if not result.converged:
        raise StepError(f"steady solve did not converge (residual {result.residual:.3e})")
    x = result.x
    nv = assembler.space.velocity[0].n_dofs
    u = np.stack([x[c * nv : (c + 1) * nv] for c in range(d)])
    p = x[d * nv : d * nv + nq]
    z = x[d * nv + nq : d * nv + 2 * nq] if form == "glsdd" else np.zeros(nq)
    return u, p, z
