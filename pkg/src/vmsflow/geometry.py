"""Periodic box geometry, element affine maps and tensor-product Gauss quadrature.

The computational domain is an axis-aligned box with uniform elements per
direction and periodic wrap in every direction.  Each element is the image of
the reference element [0,1]^d under the affine map x = (e + xi) * h, so the
inverse Jacobian is constant and diagonal.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = ["BoxDomain", "ElementMetric", "QuadratureRule", "element_metric", "gauss_rule"]


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned periodic box split into uniform elements.

    Parameters
    ----------
    lengths : tuple of float
        Box edge lengths per direction.
    n_elements : tuple of int
        Element counts per direction.
    """

    lengths: tuple
    n_elements: tuple

    def __post_init__(self):
        if len(self.lengths) != len(self.n_elements):
            raise ValueError("lengths and n_elements must have the same dimension")
        if any(L <= 0 for L in self.lengths):
            raise ValueError("box lengths must be positive")
        if any(n < 1 for n in self.n_elements):
            raise ValueError("element counts must be positive")
        object.__setattr__(self, "lengths", tuple(float(L) for L in self.lengths))
        object.__setattr__(self, "n_elements", tuple(int(n) for n in self.n_elements))

    @property
    def dim(self) -> int:
        return len(self.lengths)

    @property
    def widths(self) -> tuple:
        """Element width per direction, h_i = L_i / n_i."""
        return tuple(L / n for L, n in zip(self.lengths, self.n_elements))

    @property
    def n_total(self) -> int:
        return int(np.prod(self.n_elements))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    @property
    def element_volume(self) -> float:
        return float(np.prod(self.widths))

    def element_origin(self, element: int) -> np.ndarray:
        """Physical coordinates of the low corner of a (flattened, C-order) element."""
        idx = np.unravel_index(element, self.n_elements)
        return np.array([i * h for i, h in zip(idx, self.widths)])


@dataclass(frozen=True)
class ElementMetric:
    """Constant per-element metric of the affine reference-to-physical map."""

    inv_jacobian: np.ndarray  # d xi / d x, shape (d, d)
    G: np.ndarray = field(init=False)  # (d xi/d x)^T (d xi/d x)
    gg: float = field(init=False)  # Frobenius contraction G:G

    def __post_init__(self):
        J = np.asarray(self.inv_jacobian, dtype=float)
        object.__setattr__(self, "inv_jacobian", J)
        G = J.T @ J
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "gg", float(np.sum(G * G)))


def element_metric(domain: BoxDomain, element: int = 0) -> ElementMetric:
    """Metric tensor of an element's affine map.

    All elements of a uniform box share the same metric; the index argument is
    validated but otherwise immaterial.
    """
    if not 0 <= element < domain.n_total:
        raise IndexError(f"element index {element} out of range [0, {domain.n_total})")
    inv_j = np.diag([1.0 / h for h in domain.widths])
    return ElementMetric(inv_jacobian=inv_j)


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor-product Gauss-Legendre rule on the reference element [0,1]^d."""

    points: np.ndarray  # (n_points, d)
    weights: np.ndarray  # (n_points,)
    n_per_direction: int

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def gauss_rule(points_per_direction: int, dim: int) -> QuadratureRule:
    """Tensor-product Gauss rule, exact per direction to degree 2q-1."""
    if points_per_direction < 1:
        raise ValueError("need at least one quadrature point per direction")
    x, w = np.polynomial.legendre.leggauss(points_per_direction)
    # map from [-1, 1] to [0, 1]
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    pts = np.array(list(itertools.product(x, repeat=dim)), dtype=float)
    wts = np.array([np.prod(c) for c in itertools.product(w, repeat=dim)], dtype=float)
    return QuadratureRule(points=pts, weights=wts, n_per_direction=points_per_direction)
