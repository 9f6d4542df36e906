"""Stabilized spline-based incompressible Navier-Stokes solver on periodic boxes.

Three formulations share one divergence-conforming discretization: the
skew-symmetric Galerkin method, a VMS method with static small-scales, and a
Galerkin/least-squares method with dynamic divergence-free small-scales.  The
package instruments the discrete energy budget and conservation properties of
each run and ships a CLI that writes CSV time histories, figures, snapshots
and checkpoints.
"""

__version__ = "0.1.0"
