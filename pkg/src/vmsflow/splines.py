"""Periodic tensor-product B-spline spaces and the compatible mixed velocity/pressure pair.

All spaces live on a uniform periodic box.  A scalar space is the tensor
product of univariate periodic B-spline spaces; on n uniform elements a
periodic space of any degree has exactly n basis functions, and the nonzero
functions on element e carry the global indices (e + a) mod n, a = 0..degree.

The mixed velocity space raises the degree of component i by one in direction
i only, which makes the divergence of every discrete velocity an element of
the pressure space (discrete de Rham compatibility).  The multiplier space is
identical to the pressure space.

Basis values and derivatives at quadrature points are identical on every
element of the uniform grid, so they are evaluated once per space and cached;
the cache is immutable after construction and safe for concurrent reads.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import BoxDomain, QuadratureRule, gauss_rule

__all__ = [
    "KnotVector",
    "ScalarSplineSpace",
    "MixedSplineSpace",
    "build_periodic_knots",
    "build_mixed_space",
    "bspline_ders",
    "project_initial_condition",
    "mass_matrix",
    "divergence_matrix",
    "evaluate_field",
]


@dataclass(frozen=True)
class KnotVector:
    """Univariate periodic knot configuration over one period.

    Parameters
    ----------
    degree : int
        Polynomial degree (continuity across breakpoints is C^(degree-1)).
    breakpoints : ndarray
        Strictly increasing breakpoints spanning one period, including both
        endpoints (n_elements + 1 entries).
    periodic : bool
        Always true in this package; kept explicit for clarity.
    """

    degree: int
    breakpoints: np.ndarray
    periodic: bool = True

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if bp.ndim != 1 or bp.size < 2:
            raise ValueError("need at least two breakpoints")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if not self.periodic:
            raise ValueError("only periodic knot vectors are supported")
        object.__setattr__(self, "breakpoints", bp)

    @property
    def n_elements(self) -> int:
        return self.breakpoints.size - 1

    @property
    def length(self) -> float:
        return float(self.breakpoints[-1] - self.breakpoints[0])

    @property
    def n_basis(self) -> int:
        """Periodic spaces carry one basis function per element."""
        return self.n_elements

    @property
    def spacing(self) -> float:
        widths = np.diff(self.breakpoints)
        if not np.allclose(widths, widths[0], rtol=1e-12, atol=0.0):
            raise ValueError("non-uniform breakpoints are not supported")
        return float(widths[0])


def build_periodic_knots(n_elements: int, degree: int, length: float) -> KnotVector:
    """Uniform periodic knot vector with C^(degree-1) continuity across the seam."""
    if length <= 0:
        raise ValueError("length must be positive")
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if n_elements < degree + 1:
        raise ValueError(
            f"periodic wrap needs n_elements >= degree+1, got {n_elements} < {degree + 1}"
        )
    return KnotVector(degree=degree, breakpoints=np.linspace(0.0, length, n_elements + 1))


def bspline_ders(knots: np.ndarray, degree: int, span: int, x: float, nderiv: int) -> np.ndarray:
    """Nonzero B-spline basis functions and derivatives at one point.

    Returns an array of shape (nderiv+1, degree+1); row k holds the k-th
    derivative of the degree+1 functions that are nonzero on
    [knots[span], knots[span+1]).  Cox-de Boor triangle with the standard
    derivative recursion.
    """
    p = degree
    kmax = min(nderiv, p)
    ndu = np.zeros((p + 1, p + 1))
    ndu[0, 0] = 1.0
    left = np.zeros(p + 1)
    right = np.zeros(p + 1)
    for j in range(1, p + 1):
        left[j] = x - knots[span + 1 - j]
        right[j] = knots[span + j] - x
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved

    ders = np.zeros((nderiv + 1, p + 1))
    ders[0, :] = ndu[:, p]
    a = np.zeros((2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[:] = 0.0
        a[0, 0] = 1.0
        for k in range(1, kmax + 1):
            d = 0.0
            rk = r - k
            pk = p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d += a[s2, k] * ndu[r, pk]
            ders[k, r] = d
            s1, s2 = s2, s1

    fact = float(p)
    for k in range(1, kmax + 1):
        ders[k, :] *= fact
        fact *= p - k
    return ders


def _local_reference_ders(degree: int, xi: np.ndarray, nderiv: int) -> np.ndarray:
    """Per-element basis table on the reference interval [0, 1].

    Uses the unit-spaced local knot vector {-degree, ..., degree+1}; local
    function a pairs with global periodic index (element + a) mod n.  Returns
    shape (len(xi), nderiv+1, degree+1) in reference-coordinate derivatives.
    """
    knots = np.arange(2 * degree + 2, dtype=float) - degree
    out = np.empty((len(xi), nderiv + 1, degree + 1))
    for i, x in enumerate(np.asarray(xi, dtype=float)):
        out[i] = bspline_ders(knots, degree, degree, x, nderiv)
    return out


class ScalarSplineSpace:
    """Tensor-product periodic B-spline space with cached quadrature tables.

    Parameters
    ----------
    knotvectors : sequence of KnotVector
        One per direction; all must be uniform periodic.
    rule : QuadratureRule
        Reference-element rule shared by the whole discretization.

    Attributes
    ----------
    conn : (n_elements_total, n_local) int32
        Global dof index of each supported basis function per element.
    val : (n_qp, n_local)
        Basis values at the reference quadrature points (identical on every
        element of the uniform grid).
    grad : (n_qp, n_local, d)
        Physical first derivatives.
    lap : (n_qp, n_local)
        Physical Laplacian (sum of unmixed second derivatives).
    """

    def __init__(self, knotvectors, rule: QuadratureRule):
        self.knotvectors = tuple(knotvectors)
        self.rule = rule
        d = len(self.knotvectors)
        if rule.dim != d:
            raise ValueError("quadrature rule dimension does not match space")
        for kv in self.knotvectors:
            if kv.n_elements < kv.degree + 1:
                raise ValueError("periodic wrap needs n_elements >= degree+1")
            kv.spacing  # validates uniformity

        self.dim = d
        self.degrees = tuple(kv.degree for kv in self.knotvectors)
        self.n_per_direction = tuple(kv.n_basis for kv in self.knotvectors)
        self.n_dofs = int(np.prod(self.n_per_direction))
        self.n_elements = tuple(kv.n_elements for kv in self.knotvectors)
        self.n_elements_total = int(np.prod(self.n_elements))
        self.widths = tuple(kv.spacing for kv in self.knotvectors)
        self.n_local = int(np.prod([p + 1 for p in self.degrees]))

        # 1D tables at the per-direction quadrature abscissae
        xi_1d = np.unique(rule.points[:, 0]) if d > 1 else rule.points[:, 0]
        q1 = rule.n_per_direction
        x1, _ = np.polynomial.legendre.leggauss(q1)
        x1 = 0.5 * (x1 + 1.0)
        self._xi_1d = x1
        self._tables_1d = []
        for dir_i, kv in enumerate(self.knotvectors):
            tab = _local_reference_ders(kv.degree, x1, 2)  # (q1, 3, p+1)
            h = kv.spacing
            tab = tab.copy()
            tab[:, 1, :] /= h
            tab[:, 2, :] /= h * h
            self._tables_1d.append(tab)

        self.conn = self._build_connectivity()
        self.val, self.grad, self.lap = self._build_tables()
        for arr in (self.conn, self.val, self.grad, self.lap):
            arr.setflags(write=False)

    def _build_connectivity(self) -> np.ndarray:
        d = self.dim
        per_dir = []
        for kv in self.knotvectors:
            n = kv.n_basis
            e = np.arange(kv.n_elements)[:, None]
            a = np.arange(kv.degree + 1)[None, :]
            per_dir.append((e + a) % n)
        # flatten C-order over both element and local multi-indices
        conn = per_dir[0]
        for dir_i in range(1, d):
            m = self.n_per_direction[dir_i]
            nxt = per_dir[dir_i]
            conn = conn[:, None, :, None] * m + nxt[None, :, None, :]
            conn = conn.reshape(conn.shape[0] * nxt.shape[0], -1)
        return np.ascontiguousarray(conn.astype(np.int32))

    def _tensor_product(self, picks) -> np.ndarray:
        """Combine per-direction 1D rows (derivative order per direction)."""
        d = self.dim
        out = None
        for dir_i in range(d):
            t = self._tables_1d[dir_i][:, picks[dir_i], :]  # (q1, p+1)
            out = t if out is None else np.einsum("qa,rb->qrab", out, t).reshape(
                out.shape[0] * t.shape[0], -1
            )
        return out

    def _build_tables(self):
        d = self.dim
        val = self._tensor_product([0] * d)
        grad = np.empty((val.shape[0], val.shape[1], d))
        lap = np.zeros_like(val)
        for m in range(d):
            picks = [0] * d
            picks[m] = 1
            grad[:, :, m] = self._tensor_product(picks)
            picks[m] = 2
            lap += self._tensor_product(picks)
        return val, grad, lap

    # -- generic evaluation -------------------------------------------------

    def eval_basis(self, element: int, local_points: np.ndarray):
        """Values, gradients and Hessians of the supported basis functions.

        ``local_points`` is (m, d) in the reference element [0,1]^d; output
        derivatives are physical.  Returns (values (m, n_local),
        gradients (m, n_local, d), hessians (m, n_local, d, d)).
        """
        pts = np.atleast_2d(np.asarray(local_points, dtype=float))
        if not 0 <= element < self.n_elements_total:
            raise IndexError("element index out of range")
        if np.any(pts < -1e-12) or np.any(pts > 1 + 1e-12):
            raise ValueError("local points must lie in the reference element [0,1]^d")
        d = self.dim
        m = pts.shape[0]
        ders = []
        for dir_i, kv in enumerate(self.knotvectors):
            tab = _local_reference_ders(kv.degree, pts[:, dir_i], 2)
            h = kv.spacing
            tab[:, 1, :] /= h
            tab[:, 2, :] /= h * h
            ders.append(tab)

        def combine(picks):
            out = None
            for dir_i in range(d):
                t = ders[dir_i][:, picks[dir_i], :]
                out = t if out is None else (out[:, :, None] * t[:, None, :]).reshape(m, -1)
            return out

        values = combine([0] * d)
        grads = np.empty((m, self.n_local, d))
        hess = np.empty((m, self.n_local, d, d))
        for i in range(d):
            picks = [0] * d
            picks[i] = 1
            grads[:, :, i] = combine(picks)
            for j in range(d):
                picks = [0] * d
                picks[i] += 1
                picks[j] += 1
                hess[:, :, i, j] = combine(picks)
        return values, grads, hess

    # -- cached quadrature-point evaluation ----------------------------------

    def qp_values(self, coefs: np.ndarray) -> np.ndarray:
        """Field values at all quadrature points, shape (E, Q)."""
        ce = coefs[self.conn]
        return ce @ self.val.T

    def qp_gradients(self, coefs: np.ndarray) -> np.ndarray:
        """Physical gradients at quadrature points, shape (E, Q, d)."""
        ce = coefs[self.conn]
        out = np.empty((self.n_elements_total, self.val.shape[0], self.dim))
        for m in range(self.dim):
            out[:, :, m] = ce @ self.grad[:, :, m].T
        return out

    def qp_laplacians(self, coefs: np.ndarray) -> np.ndarray:
        """Physical Laplacian at quadrature points, shape (E, Q)."""
        ce = coefs[self.conn]
        return ce @ self.lap.T


@dataclass(frozen=True)
class MixedSplineSpace:
    """Compatible velocity/pressure/multiplier spaces on one periodic box.

    Velocity component i has degree base_degree+1 (continuity C^base_degree)
    in direction i and base_degree elsewhere; pressure and multiplier share
    the base-degree space.  In the compatible configuration div(V) lies
    exactly in the pressure space.
    """

    domain: BoxDomain
    base_degree: int
    velocity: tuple
    pressure: ScalarSplineSpace
    rule: QuadratureRule
    div_conforming: bool = True

    @property
    def multiplier(self) -> ScalarSplineSpace:
        """The multiplier space coincides with the pressure space."""
        return self.pressure

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def n_velocity_dofs(self) -> int:
        return sum(v.n_dofs for v in self.velocity)

    @property
    def qp_weights(self) -> np.ndarray:
        """Physical quadrature weights (reference weights times element volume)."""
        return self.rule.weights * self.domain.element_volume

    def dimensions(self) -> dict:
        return {
            "velocity": tuple(v.n_dofs for v in self.velocity),
            "pressure": self.pressure.n_dofs,
            "multiplier": self.pressure.n_dofs,
        }


def build_mixed_space(
    n_elements,
    base_degree: int,
    lengths=None,
    n_quad: int | None = None,
    div_conforming: bool = True,
) -> MixedSplineSpace:
    """Construct the mixed space on a periodic box.

    ``n_elements`` is the per-direction element count; ``lengths`` defaults to
    2*pi per direction.  ``n_quad`` defaults to base_degree+2 Gauss points per
    direction, enough for the enriched-velocity products assembled here.
    """
    if base_degree < 1:
        raise ValueError("base degree must be at least 1")
    n_elements = tuple(int(n) for n in np.atleast_1d(n_elements))
    d = len(n_elements)
    if lengths is None:
        lengths = (2.0 * np.pi,) * d
    domain = BoxDomain(lengths=tuple(lengths), n_elements=n_elements)
    if n_quad is None:
        n_quad = base_degree + 2
    rule = gauss_rule(n_quad, d)

    def knots(direction, degree):
        return build_periodic_knots(n_elements[direction], degree, domain.lengths[direction])

    velocity = []
    for comp in range(d):
        degs = [base_degree] * d
        if div_conforming:
            degs[comp] = base_degree + 1
        velocity.append(
            ScalarSplineSpace([knots(j, degs[j]) for j in range(d)], rule)
        )
    pressure = ScalarSplineSpace([knots(j, base_degree) for j in range(d)], rule)
    return MixedSplineSpace(
        domain=domain,
        base_degree=base_degree,
        velocity=tuple(velocity),
        pressure=pressure,
        rule=rule,
        div_conforming=div_conforming,
    )


# -- small standalone assemblies ---------------------------------------------


def _scatter_matrix(test: ScalarSplineSpace, trial: ScalarSplineSpace, local: np.ndarray):
    """Assemble a sparse matrix from one identical local block per element."""
    E = test.n_elements_total
    rows = np.repeat(test.conn, trial.n_local, axis=1).ravel()
    cols = np.tile(trial.conn, (1, test.n_local)).ravel()
    vals = np.broadcast_to(local.ravel(), (E, local.size)).ravel()
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(test.n_dofs, trial.n_dofs))
    return mat.tocsr()


def mass_matrix(space: ScalarSplineSpace, qp_weights: np.ndarray) -> sp.csr_matrix:
    local = np.einsum("q,qa,qb->ab", qp_weights, space.val, space.val)
    return _scatter_matrix(space, space, local)


def divergence_matrix(mixed: MixedSplineSpace) -> sp.csr_matrix:
    """Operator mapping stacked velocity coefficients to (pressure-test, div u)."""
    w = mixed.qp_weights
    q_space = mixed.pressure
    blocks = []
    for comp, v_space in enumerate(mixed.velocity):
        local = np.einsum("q,qa,qb->ab", w, q_space.val, v_space.grad[:, :, comp])
        blocks.append(_scatter_matrix(q_space, v_space, local))
    return sp.hstack(blocks).tocsr()


def project_initial_condition(
    velocity_fn,
    space: MixedSplineSpace,
    pressure_fn=None,
    tol: float = 1e-12,
    max_iter: int = 2000,
):
    """Divergence-constrained least-squares fit of an analytic velocity field.

    Minimizes the quadrature L2 misfit subject to (q, div u) = 0 for every
    pressure basis function, which places the coefficients on the discrete
    divergence-free manifold.  The pressure (when requested) is a plain
    zero-mean least-squares fit.  Returns (velocity coefficients (d, N),
    pressure coefficients or None).
    """
    from . import solver as _solver

    d = space.dim
    w = space.qp_weights
    pts = _physical_qp(space)
    uex = np.asarray(velocity_fn(pts.reshape(-1, d)), dtype=float).reshape(
        pts.shape[0], pts.shape[1], d
    )

    masses = [mass_matrix(v, w) for v in space.velocity]
    rhs = []
    for comp, v_space in enumerate(space.velocity):
        load = np.einsum("q,eq,qa->ea", w, uex[:, :, comp], v_space.val)
        r = np.zeros(v_space.n_dofs)
        np.add.at(r, v_space.conn, load)
        rhs.append(r)
    D = divergence_matrix(space)

    n_u = space.n_velocity_dofs
    n_q = space.pressure.n_dofs
    K = sp.bmat([[sp.block_diag(masses), D.T], [D, None]], format="csr")
    b = np.concatenate(rhs + [np.zeros(n_q)])
    # constants in the multiplier block are the only null space
    null = np.zeros((1, n_u + n_q))
    null[0, n_u:] = 1.0
    conn_offsets = []
    off = 0
    for v_space in space.velocity:
        conn_offsets.append((v_space.conn, off))
        off += v_space.n_dofs
    conn_offsets.append((space.pressure.conn, off))
    blocks = _solver.element_block_indices(conn_offsets, space.domain.n_elements)
    precond = _solver.BlockJacobiASM(K.tocsr(), blocks=blocks)
    result = _solver.solve(
        K, b, tol=tol, max_iter=max_iter, null_vectors=null, preconditioner=precond
    )
    if not result.converged:
        raise _solver.SolverError(
            "constrained projection did not converge; velocity/pressure spaces "
            f"are incompatible or ill-conditioned (residual {result.residual:.3e})"
        )
    x = result.x
    u_coefs = np.empty((d, space.velocity[0].n_dofs))
    off = 0
    for comp, v_space in enumerate(space.velocity):
        u_coefs[comp] = x[off : off + v_space.n_dofs]
        off += v_space.n_dofs

    p_coefs = None
    if pressure_fn is not None:
        pex = np.asarray(pressure_fn(pts.reshape(-1, d)), dtype=float).reshape(pts.shape[:2])
        q_space = space.pressure
        load = np.einsum("q,eq,qa->ea", w, pex, q_space.val)
        r = np.zeros(q_space.n_dofs)
        np.add.at(r, q_space.conn, load)
        Mq = mass_matrix(q_space, w)
        res = _solver.solve(Mq, r, tol=tol, max_iter=max_iter)
        if not res.converged:
            raise _solver.SolverError("pressure projection did not converge")
        p_coefs = res.x - np.mean(res.x)
    return u_coefs, p_coefs


def _physical_qp(space: MixedSplineSpace) -> np.ndarray:
    """Physical quadrature-point coordinates, shape (E, Q, d)."""
    domain = space.domain
    d = domain.dim
    E = domain.n_total
    Q = space.rule.n_points
    pts = np.empty((E, Q, d))
    origins = np.array(
        [domain.element_origin(e) for e in range(E)]
    )  # (E, d)
    h = np.array(domain.widths)
    pts[:] = origins[:, None, :] + space.rule.points[None, :, :] * h[None, None, :]
    return pts


def evaluate_field(space: ScalarSplineSpace, coefs: np.ndarray, points: np.ndarray, lengths=None):
    """Evaluate a spline field at arbitrary physical points (periodic wrap)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = space.dim
    if lengths is None:
        lengths = tuple(kv.length for kv in space.knotvectors)
    out = np.empty(pts.shape[0])
    n_el = space.n_elements
    h = space.widths
    for i, x in enumerate(pts):
        eidx = []
        local = []
        for dir_i in range(d):
            xi = (x[dir_i] % lengths[dir_i]) / h[dir_i]
            e = int(np.floor(xi))
            if e == n_el[dir_i]:  # guard against roundoff at the seam
                e -= 1
            eidx.append(e % n_el[dir_i])
            local.append(xi - e)
        element = int(np.ravel_multi_index(eidx, n_el))
        vals, _, _ = space.eval_basis(element, np.array([local]))
        out[i] = vals[0] @ coefs[space.conn[element]]
    return out
