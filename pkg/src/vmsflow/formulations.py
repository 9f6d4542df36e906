"""Global residual vectors and system matrices for the three formulations.

GAL    skew-symmetric Galerkin on the resolved scales only.
VMSS   conservative residual-based VMS with static (algebraic) small scales;
       the small scales enter as frozen data recomputed between passes.
GLSDD  skew-symmetric Galerkin/least-squares with dynamic divergence-free
       small scales and the multiplier unknown enforcing their discrete
       divergence constraint.

For GLSDD the pointwise small-scale update is affine in the forcing once the
stabilization scale and the advective velocity are frozen, so the assembler
condenses it: u'_alpha(X) = u'_free - s (grad zeta + r_M(X)) is substituted
wherever the small scales enter linearly, and the assembled matrix is the
exact derivative of the assembled residual under that convention (the FD
check in the test suite relies on this).  The advective velocity lags the
small scales; the resolved part is live (newton) or frozen (picard).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .small_scales import SmallScaleField
from .splines import MixedSplineSpace, _physical_qp

__all__ = [
    "Assembler",
    "AssemblyOutput",
    "StageData",
    "BlockLayout",
    "assemble_galerkin",
    "assemble_vmss",
    "assemble_glsdd",
]

FORMULATIONS = ("galerkin", "vmss", "glsdd")


@dataclass(frozen=True)
class BlockLayout:
    """Global dof layout: velocity components, pressure, optional multiplier."""

    fields: tuple
    offsets: dict
    sizes: dict

    @property
    def total(self) -> int:
        return sum(self.sizes.values())

    def null_vectors(self, velocity_constants: bool = False) -> np.ndarray:
        """Constant vectors of the pressure (and multiplier) blocks.

        Steady periodic problems also carry per-component constant velocity
        modes (the viscous operator kills constants); time-dependent systems
        do not, the mass term removes them.
        """
        rows = []
        for name in self.fields:
            if name in ("p", "z") or (velocity_constants and name.startswith("u")):
                v = np.zeros(self.total)
                v[self.offsets[name] : self.offsets[name] + self.sizes[name]] = 1.0
                rows.append(v)
        return np.array(rows)


@dataclass
class AssemblyOutput:
    residual: np.ndarray
    matrix: sp.csr_matrix | None
    layout: BlockLayout
    work: "QPWork"


@dataclass
class QPWork:
    """Quadrature-point fields produced during assembly, reused by callers."""

    u: np.ndarray
    grad_u: np.ndarray
    lap_u: np.ndarray
    div_u: np.ndarray
    udot: np.ndarray
    p: np.ndarray
    grad_p: np.ndarray
    adv: np.ndarray
    r_m: np.ndarray | None = None
    uprime: np.ndarray | None = None
    uprime_dot_am: np.ndarray | None = None
    pprime: np.ndarray | None = None
    grad_z: np.ndarray | None = None


@dataclass
class StageData:
    """Everything the assembler needs for one corrector pass.

    Coefficient arrays are at the generalized-alpha evaluation levels:
    ``u_alpha`` at n+alpha_f, ``udot_am`` at n+alpha_m (None for steady
    problems), ``p``/``z`` the stage pressure/multiplier.  Small-scale data is
    per quadrature point; ``uprime_lag`` is the frozen advective small-scale
    field and (for GLSDD) ``uprime_free``/``s``/``tau`` the condensation data
    of the dynamic update.  ``adv_frozen`` switches the resolved advective
    velocity to a frozen field (picard linearization).
    """

    u_alpha: np.ndarray
    p: np.ndarray
    udot_am: np.ndarray | None = None
    z: np.ndarray | None = None
    uprime_lag: np.ndarray | None = None
    uprime_free: np.ndarray | None = None
    s: np.ndarray | None = None
    tau: np.ndarray | None = None
    uprime_static: np.ndarray | None = None
    pprime_static: np.ndarray | None = None
    f_qp: np.ndarray | None = None
    ct: float = 0.0
    alpha_f: float = 1.0
    adv_frozen: np.ndarray | None = None
    include_convection: bool = True


class Assembler:
    """Element-loop-free assembly engine over one mixed space.

    All element-local basis tables are identical on the uniform periodic grid,
    so field evaluation and scatter reduce to batched matrix products; the
    global scatter uses commutative accumulation (bincount), identical for any
    worker decomposition.
    """

    def __init__(self, space: MixedSplineSpace, nu: float, formulation: str,
                 linearization: str = "newton"):
        if formulation not in FORMULATIONS:
            raise ValueError(f"unknown formulation '{formulation}'")
        if linearization not in ("newton", "picard"):
            raise ValueError(f"unknown linearization '{linearization}'")
        if nu < 0:
            raise ValueError("viscosity must be nonnegative")
        self.space = space
        self.nu = float(nu)
        self.formulation = formulation
        self.linearization = linearization
        self.d = space.dim
        self.wq = space.qp_weights
        self.E = space.domain.n_total
        self.Q = space.rule.n_points
        self.qp_points = _physical_qp(space)

        names = [f"u{c}" for c in range(self.d)] + ["p"]
        if formulation == "glsdd":
            names.append("z")
        self._spaces = {f"u{c}": space.velocity[c] for c in range(self.d)}
        self._spaces["p"] = space.pressure
        if formulation == "glsdd":
            self._spaces["z"] = space.multiplier
        offsets, sizes = {}, {}
        off = 0
        for name in names:
            offsets[name] = off
            sizes[name] = self._spaces[name].n_dofs
            off += sizes[name]
        self.layout = BlockLayout(fields=tuple(names), offsets=offsets, sizes=sizes)

    # -- shared helpers -------------------------------------------------------

    def velocity_fields(self, coefs: np.ndarray):
        """Values, gradients (grad[..., i, j] = d_j u_i), Laplacians, divergence."""
        E, Q, d = self.E, self.Q, self.d
        u = np.empty((E, Q, d))
        grad = np.empty((E, Q, d, d))
        lap = np.empty((E, Q, d))
        for c in range(d):
            v = self.space.velocity[c]
            u[:, :, c] = v.qp_values(coefs[c])
            grad[:, :, c, :] = v.qp_gradients(coefs[c])
            lap[:, :, c] = v.qp_laplacians(coefs[c])
        div = np.einsum("eqcc->eq", grad)
        return u, grad, lap, div

    def velocity_values(self, coefs: np.ndarray):
        return np.stack(
            [self.space.velocity[c].qp_values(coefs[c]) for c in range(self.d)], axis=-1
        )

    def conn_offsets(self):
        """(connectivity, offset) pairs for Schwarz block construction."""
        return [(self._spaces[n].conn, self.layout.offsets[n]) for n in self.layout.fields]

    def _scatter_vector(self, name: str, local: np.ndarray, out: np.ndarray):
        spc = self._spaces[name]
        off = self.layout.offsets[name]
        out[off : off + spc.n_dofs] += np.bincount(
            spc.conn.ravel(), weights=local.ravel(), minlength=spc.n_dofs
        )

    def _test_contract(self, name: str, f_val=None, f_grad=None, f_lap=None):
        """Contract qp integrands against a test space's cached tables."""
        spc = self._spaces[name]
        wq = self.wq
        loc = None
        if f_val is not None:
            loc = (f_val * wq) @ spc.val
        if f_grad is not None:
            for j in range(self.d):
                term = (f_grad[:, :, j] * wq) @ spc.grad[:, :, j]
                loc = term if loc is None else loc + term
        if f_lap is not None:
            term = (f_lap * wq) @ spc.lap
            loc = term if loc is None else loc + term
        return loc

    # -- residual -------------------------------------------------------------

    def residual(self, stage: StageData):
        d, E, Q = self.d, self.E, self.Q
        nu = self.nu
        u, grad_u, lap_u, div_u = self.velocity_fields(stage.u_alpha)
        udot = (
            self.velocity_values(stage.udot_am)
            if stage.udot_am is not None
            else np.zeros((E, Q, d))
        )
        pqp = self.space.pressure.qp_values(stage.p)
        grad_p = self.space.pressure.qp_gradients(stage.p)

        uprime_lag = stage.uprime_lag if stage.uprime_lag is not None else np.zeros((E, Q, d))
        if stage.adv_frozen is not None:
            adv = stage.adv_frozen
        else:
            adv = u + uprime_lag

        work = QPWork(u=u, grad_u=grad_u, lap_u=lap_u, div_u=div_u, udot=udot,
                      p=pqp, grad_p=grad_p, adv=adv)

        R = np.zeros(self.layout.total)
        conv = (
            np.einsum("eqij,eqj->eqi", grad_u, adv)
            if stage.include_convection
            else np.zeros((E, Q, d))
        )

        if self.formulation == "galerkin":
            for i in range(d):
                f_val = udot[:, :, i] + 0.5 * conv[:, :, i]
                if stage.f_qp is not None:
                    f_val = f_val - stage.f_qp[:, :, i]
                f_grad = nu * (grad_u[:, :, i, :] + grad_u[:, :, :, i])
                if stage.include_convection:
                    f_grad = f_grad - 0.5 * adv * u[:, :, i][:, :, None]
                f_grad[:, :, i] -= pqp
                self._scatter_vector(f"u{i}", self._test_contract(f"u{i}", f_val, f_grad), R)
            self._scatter_vector("p", self._test_contract("p", div_u), R)
            return R, work

        if self.formulation == "vmss":
            ups = stage.uprime_static
            pps = stage.pprime_static
            ubar = u + ups
            for i in range(d):
                f_val = udot[:, :, i]
                if stage.f_qp is not None:
                    f_val = f_val - stage.f_qp[:, :, i]
                f_grad = nu * (grad_u[:, :, i, :] + grad_u[:, :, :, i])
                if stage.include_convection:
                    f_grad = f_grad - ubar * ubar[:, :, i][:, :, None]
                f_grad[:, :, i] -= pqp + pps
                f_lap = -nu * ups[:, :, i]
                self._scatter_vector(
                    f"u{i}", self._test_contract(f"u{i}", f_val, f_grad, f_lap), R
                )
            self._scatter_vector("p", self._test_contract("p", div_u, -ups), R)
            work.uprime = ups
            work.pprime = pps
            return R, work

        # glsdd
        grad_z = self.space.multiplier.qp_gradients(stage.z)
        r_m = udot + conv + grad_p - nu * lap_u
        if stage.f_qp is not None:
            r_m = r_m - stage.f_qp
        uprime = stage.uprime_free - stage.s[:, :, None] * (grad_z + r_m)
        uprime_dot_am = -(uprime / stage.tau[:, :, None] + grad_z + r_m)
        work.r_m = r_m
        work.uprime = uprime
        work.uprime_dot_am = uprime_dot_am
        work.grad_z = grad_z

        for i in range(d):
            f_val = udot[:, :, i] + uprime_dot_am[:, :, i] + 0.5 * conv[:, :, i]
            if stage.f_qp is not None:
                f_val = f_val - stage.f_qp[:, :, i]
            f_grad = nu * (grad_u[:, :, i, :] + grad_u[:, :, :, i])
            if stage.include_convection:
                f_grad = f_grad - adv * (0.5 * u[:, :, i] + uprime[:, :, i])[:, :, None]
            f_grad[:, :, i] -= pqp
            f_lap = nu * uprime[:, :, i]
            self._scatter_vector(f"u{i}", self._test_contract(f"u{i}", f_val, f_grad, f_lap), R)
        self._scatter_vector("p", self._test_contract("p", div_u), R)
        self._scatter_vector("z", self._test_contract("z", None, uprime), R)
        return R, work

    # -- jacobian ---------------------------------------------------------------

    def jacobian(self, stage: StageData, work: QPWork) -> sp.csr_matrix:
        """Exact derivative of :meth:`residual` with tau and lags held frozen."""
        d = self.d
        nu = self.nu
        af = stage.alpha_f
        ct = stage.ct
        newton = self.linearization == "newton" and stage.adv_frozen is None
        conv_on = stage.include_convection
        blocks: dict = {}

        def add(test, trial, A, Dt, Dl):
            K = self._pair_block(A, Dt, Dl)
            key = (test, trial)
            if key in blocks:
                blocks[key] += K
            else:
                blocks[key] = K

        adv = work.adv
        u = work.u
        grad_u = work.grad_u
        q_val = self._spaces["p"].val
        q_grad = self._spaces["p"].grad

        # (a.grad)N_b per velocity space, (E, Q, n_local)
        aG = {c: self._aGa(f"u{c}", adv) for c in range(d)} if conv_on else {}

        def add_viscous_and_pressure(i):
            ti = f"u{i}"
            vi = self._spaces[ti]
            for c in range(d):
                vc = self._spaces[f"u{c}"]
                if c == i:
                    for j in range(d):
                        add(ti, f"u{c}", None, vi.grad[:, :, j], af * nu * vc.grad[:, :, j])
                add(ti, f"u{c}", None, vi.grad[:, :, c], af * nu * vc.grad[:, :, i])
            add(ti, "p", None, vi.grad[:, :, i], -q_val)

        def add_div_row():
            for c in range(d):
                vc = self._spaces[f"u{c}"]
                add("p", f"u{c}", None, q_val, af * vc.grad[:, :, c])

        if self.formulation == "galerkin":
            for i in range(d):
                ti = f"u{i}"
                vi = self._spaces[ti]
                add(ti, ti, None, vi.val, ct * vi.val)
                add_viscous_and_pressure(i)
                if conv_on:
                    add(ti, ti, 0.5 * af, vi.val, aG[i])
                    add(ti, ti, -0.5 * af, aG[i], vi.val)
                    if newton:
                        for c in range(d):
                            vc = self._spaces[f"u{c}"]
                            add(ti, f"u{c}", 0.5 * af * grad_u[:, :, i, c], vi.val, vc.val)
                            add(ti, f"u{c}", -0.5 * af * u[:, :, i], vi.grad[:, :, c], vc.val)
            add_div_row()
            return self._blocks_to_csr(blocks)

        if self.formulation == "vmss":
            ubar = u + stage.uprime_static
            for i in range(d):
                ti = f"u{i}"
                vi = self._spaces[ti]
                add(ti, ti, None, vi.val, ct * vi.val)
                add_viscous_and_pressure(i)
                if conv_on:
                    ubarGa_i = self._aGa(ti, ubar)
                    add(ti, ti, -af, ubarGa_i, vi.val)
                    if newton:
                        for c in range(d):
                            vc = self._spaces[f"u{c}"]
                            add(ti, f"u{c}", -af * ubar[:, :, i], vi.grad[:, :, c], vc.val)
            add_div_row()
            return self._blocks_to_csr(blocks)

        # glsdd
        s = stage.s
        phi = 1.0 - s / stage.tau  # column coefficient of udot'_am terms
        uprime = work.uprime

        # d r_M / d U_c without the advective-velocity variation, (E, Q, n_local)
        rU = {}
        for c in range(d):
            vc = self._spaces[f"u{c}"]
            base = ct * vc.val[None, :, :] - (nu * af) * vc.lap[None, :, :]
            rU[c] = base + af * aG[c] if conv_on else base

        for i in range(d):
            ti = f"u{i}"
            vi = self._spaces[ti]
            add(ti, ti, None, vi.val, ct * vi.val)
            add_viscous_and_pressure(i)

            # columns of (grad dz + d r_M)_i appear through three test factors:
            #   -(N_a, phi .)  from the substituted small-scale rate,
            #   +s (a.grad N_a, .)  from -(a.grad w, u'),
            #   -s nu (lap N_a, .)  from (nu lap w, u').
            aGa_i = aG[i] if conv_on else None
            factors = [(-phi, vi.val)]
            if conv_on:
                factors.append((s, aGa_i))
            factors.append((-nu * s, vi.lap))
            for coeff, Dt in factors:
                add(ti, f"u{i}", coeff, Dt, rU[i])
                add(ti, "p", coeff, Dt, q_grad[:, :, i])
                add(ti, "z", coeff, Dt, q_grad[:, :, i])
                if newton and conv_on:
                    for c in range(d):
                        vc = self._spaces[f"u{c}"]
                        add(ti, f"u{c}", coeff * af * grad_u[:, :, i, c], Dt, vc.val)

            if conv_on:
                # skew pair in the resolved slots
                add(ti, ti, 0.5 * af, vi.val, aG[i])
                add(ti, ti, -0.5 * af, aGa_i, vi.val)
                if newton:
                    for c in range(d):
                        vc = self._spaces[f"u{c}"]
                        add(ti, f"u{c}", 0.5 * af * grad_u[:, :, i, c], vi.val, vc.val)
                        add(ti, f"u{c}", -0.5 * af * u[:, :, i], vi.grad[:, :, c], vc.val)
                        add(ti, f"u{c}", -af * uprime[:, :, i], vi.grad[:, :, c], vc.val)

        add_div_row()

        # multiplier row: d/dX of (grad theta, u') with du' = -s (grad dz + d r_M)
        for c in range(d):
            vc = self._spaces[f"u{c}"]
            add("z", f"u{c}", -s, q_grad[:, :, c], rU[c])
            if newton and conv_on:
                Dt = np.einsum("qai,eqi->eqa", q_grad, grad_u[:, :, :, c])
                add("z", f"u{c}", -af * s, Dt, vc.val)
        for j in range(d):
            add("z", "p", -s, q_grad[:, :, j], q_grad[:, :, j])
            add("z", "z", -s, q_grad[:, :, j], q_grad[:, :, j])
        return self._blocks_to_csr(blocks)

    # -- low level ----------------------------------------------------------------

    def _aGa(self, name: str, a_field: np.ndarray) -> np.ndarray:
        """(a.grad) applied to every test function of a space: (E, Q, n_local)."""
        g = self._spaces[name].grad
        return np.einsum("eqj,qbj->eqb", a_field, g)

    def _pair_block(self, A, Dtest, Dtrial) -> np.ndarray:
        """K[e,a,b] = sum_q w_q A[e,q] Dtest[(e,)q,a] Dtrial[(e,)q,b]."""
        wq = self.wq
        if A is None:
            Aw = np.broadcast_to(wq, (self.E, self.Q))
        elif np.isscalar(A) or np.ndim(A) == 0:
            Aw = np.broadcast_to(float(A) * wq, (self.E, self.Q))
        else:
            Aw = A * wq
        if Dtest.ndim == 2:
            tmp = Aw[:, :, None] * Dtest[None, :, :]
        else:
            tmp = Aw[:, :, None] * Dtest
        right = Dtrial if Dtrial.ndim == 3 else np.broadcast_to(Dtrial, (self.E,) + Dtrial.shape)
        return np.matmul(tmp.transpose(0, 2, 1), right)

    def _blocks_to_csr(self, blocks: dict) -> sp.csr_matrix:
        rows_all, cols_all, vals_all = [], [], []
        for (tname, lname), K in blocks.items():
            tspc = self._spaces[tname]
            lspc = self._spaces[lname]
            toff = self.layout.offsets[tname]
            loff = self.layout.offsets[lname]
            E, na, nb = K.shape
            rows = np.broadcast_to(tspc.conn[:, :, None] + toff, (E, na, nb))
            cols = np.broadcast_to(lspc.conn[:, None, :] + loff, (E, na, nb))
            rows_all.append(rows.ravel())
            cols_all.append(cols.ravel())
            vals_all.append(K.ravel())
        n = self.layout.total
        mat = sp.coo_matrix(
            (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
            shape=(n, n),
        )
        return mat.tocsr()

    def assemble(self, stage: StageData, want_matrix: bool = True) -> AssemblyOutput:
        R, work = self.residual(stage)
        mat = self.jacobian(stage, work) if want_matrix else None
        return AssemblyOutput(residual=R, matrix=mat, layout=self.layout, work=work)


def assemble_galerkin(assembler: Assembler, stage: StageData, want_matrix: bool = True):
    if assembler.formulation != "galerkin":
        raise ValueError("assembler is not configured for the Galerkin formulation")
    return assembler.assemble(stage, want_matrix)


def assemble_vmss(assembler: Assembler, stage: StageData, want_matrix: bool = True):
    if assembler.formulation != "vmss":
        raise ValueError("assembler is not configured for the VMSS formulation")
    return assembler.assemble(stage, want_matrix)


def assemble_glsdd(assembler: Assembler, stage: StageData, want_matrix: bool = True):
    if assembler.formulation != "glsdd":
        raise ValueError("assembler is not configured for the GLSDD formulation")
    return assembler.assemble(stage, want_matrix)
