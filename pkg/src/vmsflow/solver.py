"""Sparse iterative solution of the linearized saddle-point systems.

Flexible GMRES with right preconditioning and an explicit null-space
projection: the pressure and multiplier blocks of the periodic problem carry
constant null vectors, so every Krylov vector and the returned solution are
projected onto the zero-mean subspace.  The default preconditioner is a
one-level overlapping-block (additive Schwarz) method whose blocks gather all
degrees of freedom supported on a group of neighbouring elements, each block
solved with a local sparse LU.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "SolverError",
    "SolveResult",
    "solve",
    "NullSpaceProjector",
    "build_preconditioner",
    "element_block_indices",
]


class SolverError(RuntimeError):
    """Linear algebra failure the caller must decide how to handle."""


@dataclass
class SolveResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual: float  # relative true residual at exit


class NullSpaceProjector:
    """Orthogonal projector removing a handful of known null vectors."""

    def __init__(self, null_vectors: np.ndarray | None, n: int):
        if null_vectors is None or len(null_vectors) == 0:
            self._basis = None
        else:
            v = np.atleast_2d(np.asarray(null_vectors, dtype=float))
            if v.shape[1] != n:
                raise ValueError("null vector length does not match system size")
            q, _ = np.linalg.qr(v.T)
            self._basis = q

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self._basis is None:
            return x
        return x - self._basis @ (self._basis.T @ x)


def element_block_indices(conn_offsets, n_elements, group: int = 2):
    """Overlapping dof blocks for the additive Schwarz preconditioner.

    ``conn_offsets`` is a list of (connectivity array (E, n_local), global dof
    offset) pairs, one per field block; elements are grouped into cubes of
    ``group`` per direction and each block receives every dof supported there.
    """
    n_elements = tuple(n_elements)
    macro = [range(0, n, group) for n in n_elements]
    blocks = []
    for corner in itertools.product(*macro):
        idx = [range(c, min(c + group, n)) for c, n in zip(corner, n_elements)]
        eids = np.array(
            [np.ravel_multi_index(t, n_elements) for t in itertools.product(*idx)]
        )
        dofs = [conn[eids].ravel() + off for conn, off in conn_offsets]
        blocks.append(np.unique(np.concatenate(dofs)))
    return blocks


class BlockJacobiASM:
    """One-level additive Schwarz with local sparse LU solves.

    Without explicit ``blocks`` the dofs are split into contiguous overlapping
    ranges, which suits definite systems; saddle-point callers should pass
    element-based blocks so every local matrix mixes field types.
    """

    def __init__(self, matrix: sp.csr_matrix, blocks=None, block_size: int = 600, overlap: int = 60):
        n = matrix.shape[0]
        self.n = n
        if blocks is None:
            blocks = []
            start = 0
            while start < n:
                lo = max(0, start - overlap)
                hi = min(n, start + block_size + overlap)
                blocks.append(np.arange(lo, hi))
                start += block_size
        csc = matrix.tocsc()
        scale = abs(matrix).max() or 1.0
        self.blocks = []
        for idx in blocks:
            local = csc[idx][:, idx].tocsc()
            try:
                lu = spla.splu(local)
            except RuntimeError:
                # exactly singular local block: tiny shift keeps it usable
                shifted = (local + 1e-10 * scale * sp.identity(len(idx), format="csc")).tocsc()
                try:
                    lu = spla.splu(shifted)
                except RuntimeError as exc:
                    raise SolverError(f"local factorization failed: {exc}") from exc
            self.blocks.append((idx, lu))

    def __call__(self, r: np.ndarray) -> np.ndarray:
        z = np.zeros_like(r)
        for idx, lu in self.blocks:
            z[idx] += lu.solve(r[idx])
        return z


class ILUPreconditioner:
    def __init__(self, matrix: sp.csr_matrix, drop_tol: float = 1e-5, fill_factor: float = 10.0):
        try:
            self._ilu = spla.spilu(matrix.tocsc(), drop_tol=drop_tol, fill_factor=fill_factor)
        except RuntimeError as exc:
            raise SolverError(f"ILU factorization failed: {exc}") from exc

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return self._ilu.solve(r)


def build_preconditioner(matrix: sp.csr_matrix, kind: str = "asm", **opts):
    """Factory for the configured preconditioner; ``none`` is the identity."""
    if kind == "asm":
        return BlockJacobiASM(matrix, **opts)
    if kind == "ilu":
        return ILUPreconditioner(matrix, **opts)
    if kind == "none":
        return lambda r: r.copy()
    raise ValueError(f"unknown preconditioner '{kind}'")


def solve(
    matrix: sp.spmatrix,
    rhs: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 500,
    restart: int = 100,
    preconditioner="asm",
    null_vectors: np.ndarray | None = None,
    x0: np.ndarray | None = None,
) -> SolveResult:
    """Flexible GMRES on the zero-mean-constrained subspace.

    ``preconditioner`` is a name understood by ``build_preconditioner`` or a
    callable applying the approximate inverse.  Non-convergence after
    ``max_iter`` is reported in the result together with the achieved relative
    residual; the caller decides whether that is fatal.
    """
    A = matrix.tocsr()
    n = A.shape[0]
    b = np.asarray(rhs, dtype=float)
    project = NullSpaceProjector(null_vectors, n)
    M = build_preconditioner(A, preconditioner) if isinstance(preconditioner, str) else preconditioner

    b = project(b)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return SolveResult(x=np.zeros(n), converged=True, iterations=0, residual=0.0)

    x = np.zeros(n) if x0 is None else project(np.asarray(x0, dtype=float).copy())
    total_iters = 0

    while True:
        r = project(b - A @ x)
        beta = np.linalg.norm(r)
        if beta / b_norm <= tol:
            return SolveResult(x=x, converged=True, iterations=total_iters, residual=beta / b_norm)
        if total_iters >= max_iter:
            return SolveResult(x=x, converged=False, iterations=total_iters, residual=beta / b_norm)

        m = min(restart, max_iter - total_iters)
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        V[0] = r / beta
        g = np.zeros(m + 1)
        g[0] = beta
        cs = np.zeros(m)
        sn = np.zeros(m)
        k_used = 0
        for k in range(m):
            Z[k] = project(M(V[k]))
            w = project(A @ Z[k])
            for i in range(k + 1):  # modified Gram-Schmidt
                H[i, k] = np.dot(w, V[i])
                w -= H[i, k] * V[i]
            H[k + 1, k] = np.linalg.norm(w)
            if H[k + 1, k] > 1e-300:
                V[k + 1] = w / H[k + 1, k]
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            denom = np.hypot(H[k, k], H[k + 1, k])
            cs[k] = H[k, k] / denom
            sn[k] = H[k + 1, k] / denom
            H[k, k] = denom
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            k_used = k + 1
            total_iters += 1
            if abs(g[k + 1]) / b_norm <= tol or total_iters >= max_iter:
                break
        y = np.linalg.solve(H[:k_used, :k_used], g[:k_used])
        x = project(x + y @ Z[:k_used])
        # loop re-checks the true residual and restarts if orthogonality slipped
