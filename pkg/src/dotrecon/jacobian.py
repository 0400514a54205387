"""Derivative of the boundary measurements with respect to ``q = (D, mu)``.

The adjoint route uses, for source ``s`` and boundary node ``b``::

    dg[s,b]/dD_T  = -int_T grad u_s . grad w_b
    dg[s,b]/dmu_T = -int_T u_s w_b

where ``w_b = A^{-1} e_b``. The system matrix is complex symmetric, so the
adjoint solve reuses the forward factorization. Columns are ordered
``(D_free..., mu_free...)``; rows follow the measurement flattening.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import ForwardSystem, SourceBank, assemble, forward_map, load_vector
from .mesh import Mesh
from .phantom import ParameterField, free_parameter_index

__all__ = [
    "JacobianMatrix",
    "adjoint_jacobian",
    "fd_jacobian",
    "misfit_gradient",
    "complex_to_rows",
]


@dataclass(frozen=True)
class JacobianMatrix:
    """Dense real Jacobian.

    ``matrix @ (dq / column_scale)`` is the linearized change of the
    flattened measurements; ``column_scale`` is all ones for physical units.
    """

    matrix: np.ndarray
    column_scale: np.ndarray

    @property
    def shape(self):
        return self.matrix.shape

    def scaled(self, scale) -> "JacobianMatrix":
        """Jacobian with respect to ``x = q / scale``."""
        scale = np.asarray(scale, dtype=float)
        return JacobianMatrix(self.matrix * scale[None, :], self.column_scale * scale)


def complex_to_rows(Jc: np.ndarray) -> np.ndarray:
    """(S, Nb, P) complex -> (2*S*Nb, P) real, re/im interleaved per node."""
    S, Nb, P = Jc.shape
    out = np.empty((S, Nb, 2, P))
    out[:, :, 0] = Jc.real
    out[:, :, 1] = Jc.imag
    return out.reshape(2 * S * Nb, P)


def _element_products(mesh, tri, U, W):
    """-int_T grad u . grad w and -int_T u w for every (u, w) column pair.

    U: (N, S), W: (N, Nb). Returns two (S, Nb, len(tri)) arrays.
    """
    t = mesh.triangles[tri]
    G = mesh.basis_gradients[tri]  # (n,3,2)
    area = mesh.areas[tri]
    Ul = U[t]  # (n,3,S)
    Wl = W[t]  # (n,3,Nb)
    gu = np.einsum("nis,nik->nks", Ul, G)  # (n,2,S)
    gw = np.einsum("nib,nik->nkb", Wl, G)
    dD = -np.einsum("n,nks,nkb->sbn", area, gu, gw, optimize=True)
    # local mass = area/12 (1 + delta_ij)
    su = Ul.sum(axis=1)
    sw = Wl.sum(axis=1)
    dmu = -(np.einsum("n,ns,nb->sbn", area / 12.0, su, sw, optimize=True)
            + np.einsum("n,nis,nib->sbn", area / 12.0, Ul, Wl, optimize=True))
    return dD, dmu


def adjoint_jacobian(mesh: Mesh, q: ParameterField, k: float, sources: SourceBank,
                     system: ForwardSystem = None) -> JacobianMatrix:
    """Jacobian of the flattened measurements over the free parameters of ``q``."""
    if system is None:
        system = assemble(mesh, q, k)
    free = free_parameter_index(q)
    bn = mesh.boundary_nodes
    U = system.solve(load_vector(mesh, sources.values))
    E = np.zeros((mesh.n_nodes, len(bn)))
    E[bn, np.arange(len(bn))] = 1.0
    W = system.solve(E)
    dD, dmu = _element_products(mesh, free, U, W)
    Jc = np.concatenate([dD, dmu], axis=2)
    return JacobianMatrix(complex_to_rows(Jc), np.ones(2 * len(free)))


def misfit_gradient(mesh: Mesh, q: ParameterField, k: float, sources: SourceBank,
                    residual, system: ForwardSystem = None) -> np.ndarray:
    """``J^T r`` for a flattened real residual ``r``, via ``S`` adjoint solves."""
    if system is None:
        system = assemble(mesh, q, k)
    free = free_parameter_index(q)
    bn = mesh.boundary_nodes
    S = len(sources)
    r = np.asarray(residual, dtype=float).reshape(S, len(bn), 2)
    rho = r[..., 0] - 1j * r[..., 1]  # conj(r_re + i r_im)
    U = system.solve(load_vector(mesh, sources.values))
    rhs = np.zeros((mesh.n_nodes, S), dtype=complex)
    rhs[bn] = rho.T
    Z = system.solve(rhs)  # Z[:, s] = sum_b conj(rho_sb) w_b
    t = mesh.triangles[free]
    G = mesh.basis_gradients[free]
    area = mesh.areas[free]
    Ul, Zl = U[t], Z[t]
    gu = np.einsum("nis,nik->nks", Ul, G)
    gz = np.einsum("nis,nik->nks", Zl, G)
    gD = -np.einsum("n,nks,nks->n", area, gu, gz)
    gmu = -(area / 12.0) * ((Ul.sum(1) * Zl.sum(1)).sum(-1) + np.einsum("nis,nis->n", Ul, Zl))
    return np.concatenate([gD.real, gmu.real])


def fd_jacobian(mesh: Mesh, q: ParameterField, k: float, sources: SourceBank,
                step: float = 1e-6) -> JacobianMatrix:
    """Central differences with relative step ``step * |q_j|`` per free parameter."""
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = q.free_vector()
    cols = []
    for j in range(len(x0)):
        h = step * max(abs(x0[j]), 1e-12)
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += h
        xm[j] -= h
        if xm[j] <= 0:
            raise ValueError(f"perturbed parameter {j} leaves the positive orthant")
        gp = forward_map(mesh, q.with_free(xp), k, sources).vector
        gm = forward_map(mesh, q.with_free(xm), k, sources).vector
        cols.append((gp - gm) / (2.0 * h))
    return JacobianMatrix(np.column_stack(cols), np.ones(len(x0)))
