"""Vector-valued view of the forward problem over the free parameters.

Reconstruction engines work on flat vectors. :class:`DotModel` maps them to
parameter fields on a mesh, either in physical units (``q``) or scaled by
the boundary background (``x = q / q_b``), which puts ``D`` and ``mu`` on
the same footing for Gauss-Newton.
"""

from __future__ import annotations

import numpy as np

from .forward import SourceBank, assemble, forward_map
from .jacobian import adjoint_jacobian, misfit_gradient
from .mesh import Mesh, edge_adjacency
from .phantom import ParameterBounds, ParameterField, free_parameter_index
from .regularizers import graph_laplacian

__all__ = ["DotModel"]


class DotModel:
    """Forward map, Jacobian and bounds for the free entries of ``reference``.

    Pinned entries of ``reference`` stay fixed at the boundary background.
    """

    def __init__(self, reference: ParameterField, k: float, sources: SourceBank,
                 bounds: ParameterBounds = None, mu_floor: float = 1e-6):
        self.reference = reference
        self.mesh: Mesh = reference.mesh
        self.k = float(k)
        self.sources = sources
        self.bounds = bounds or ParameterBounds()
        self.free = free_parameter_index(reference)
        n = len(self.free)
        D_b, mu_b = reference.boundary_background
        self.scale = np.concatenate([np.full(n, float(D_b)), np.full(n, float(mu_b))])
        self.lower = np.concatenate([np.full(n, self.bounds.D_min), np.full(n, mu_floor * mu_b)])
        self.upper = np.concatenate([np.full(n, self.bounds.D_max), np.full(n, self.bounds.mu_max)])
        self._last = (None, None)

    @property
    def n_free(self) -> int:
        return len(self.free)

    @property
    def size(self) -> int:
        return 2 * len(self.free)

    # -- conversions --------------------------------------------------------
    def field(self, q) -> ParameterField:
        """Parameter field for a physical free vector ``q``."""
        return self.reference.with_free(q)

    def to_scaled(self, q):
        return np.asarray(q, dtype=float) / self.scale

    def to_physical(self, x):
        return np.asarray(x, dtype=float) * self.scale

    def background(self) -> np.ndarray:
        """Physical free vector equal to the boundary background everywhere."""
        return self.scale.copy()

    def in_bounds(self, q) -> bool:
        q = np.asarray(q)
        return bool(np.all(q > 0) and np.all(q >= self.lower) and np.all(q <= self.upper))

    def project(self, q):
        return np.clip(q, self.lower, self.upper)

    # -- physical-unit operators -------------------------------------------
    def _system(self, q):
        key = np.asarray(q, dtype=float).tobytes()
        if self._last[0] != key:
            f = self.field(q)
            self._last = (key, (f, assemble(self.mesh, f, self.k)))
        return self._last[1]

    def forward(self, q) -> np.ndarray:
        f, system = self._system(q)
        return forward_map(self.mesh, f, self.k, self.sources, system=system).vector

    def jacobian(self, q) -> np.ndarray:
        f, system = self._system(q)
        return adjoint_jacobian(self.mesh, f, self.k, self.sources, system=system).matrix

    def gradient(self, q, residual) -> np.ndarray:
        f, system = self._system(q)
        return misfit_gradient(self.mesh, f, self.k, self.sources, residual, system=system)

    # -- scaled operators for IRGN --------------------------------------------
    def forward_scaled(self, x):
        return self.forward(self.to_physical(x))

    def jacobian_scaled(self, x):
        return self.jacobian(self.to_physical(x)) * self.scale[None, :]

    def gradient_scaled(self, x, residual):
        return self.gradient(self.to_physical(x), residual) * self.scale

    def project_scaled(self, x):
        return self.to_scaled(self.project(self.to_physical(x)))

    def laplacian(self):
        return graph_laplacian(self.mesh, edge_adjacency(self.mesh), self.free)
