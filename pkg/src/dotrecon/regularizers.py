"""Regularization functionals and the edge-weighted graph Laplacian.

All functionals act on per-triangle vectors. ``dot_reg`` combines an inner
functional applied to the background-normalized absorption ``mu / mu_b``
and reduced scattering ``mus / mus_b`` with ``mus = 1/(3D) - mu``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .mesh import EdgeAdjacency, Mesh
from .phantom import MU_BACKGROUND, MUS_BACKGROUND, ParameterField

__all__ = [
    "RegularizerError",
    "RegularizerSpec",
    "lp_reg",
    "tv_reg",
    "mixed_reg",
    "dot_reg",
    "make_inner",
    "make_dot_regularizer",
    "graph_laplacian",
    "regularizer_from_dict",
]


class RegularizerError(ValueError):
    pass


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "tv"  # lp | tv | mixed | dot-combined
    p: float = 1.0
    weights: Optional[tuple] = None
    alpha1: float = 1.0
    alpha2: float = 1.0
    beta1: float = 0.5
    beta2: float = 0.5
    inner: str = "tv"  # inner functional of dot-combined
    mu_background: float = MU_BACKGROUND
    mus_background: float = MUS_BACKGROUND

    def __post_init__(self):
        if self.kind not in ("lp", "tv", "mixed", "dot-combined"):
            raise RegularizerError(f"unknown regularizer kind {self.kind!r}")
        if self.inner not in ("lp", "tv", "mixed"):
            raise RegularizerError(f"unknown inner regularizer {self.inner!r}")
        if not 0 < self.p <= 2:
            raise RegularizerError("p must lie in (0, 2]")
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise RegularizerError("mixing weights must be positive")
        if self.beta1 <= 0 or self.beta2 <= 0 or self.beta1 + self.beta2 != 1.0:
            raise RegularizerError("beta weights must be positive and sum to 1")
        if self.mu_background <= 0 or self.mus_background <= 0:
            raise RegularizerError("backgrounds must be positive")


def lp_reg(y, y_b, c=None, p: float = 1.0) -> float:
    """``sum_i c_i |y_i - yb_i|**p``."""
    y = np.asarray(y, dtype=float)
    y_b = np.asarray(y_b, dtype=float)
    if not 0 < p <= 2:
        raise RegularizerError("p must lie in (0, 2]")
    c = np.ones_like(y) if c is None else np.asarray(c, dtype=float)
    if c.shape != y.shape or (y_b.ndim and y_b.shape != y.shape):
        raise RegularizerError("length mismatch")
    if (c < 0).any():
        raise RegularizerError("weights must be non-negative")
    return float(np.sum(c * np.abs(y - y_b) ** p))


def tv_reg(y, adj: EdgeAdjacency) -> float:
    """``sum_i l_i |y_a(i) - y_b(i)|`` over interior edges."""
    y = np.asarray(y, dtype=float)
    if len(adj) and max(adj.tri_a.max(), adj.tri_b.max()) >= len(y):
        raise RegularizerError("adjacency index out of range for y")
    return float(np.sum(adj.length * np.abs(y[adj.tri_a] - y[adj.tri_b])))


def mixed_reg(y, y_b, c, p, adj: EdgeAdjacency, alpha1: float, alpha2: float) -> float:
    if alpha1 <= 0 or alpha2 <= 0:
        raise RegularizerError("mixing weights must be positive")
    return alpha1 * lp_reg(y, y_b, c, p) + alpha2 * tv_reg(y, adj)


def make_inner(spec: RegularizerSpec, adj: EdgeAdjacency, kind: str = None) -> Callable:
    """Inner functional ``y -> R(y)`` with background ``y_b = 1``."""
    kind = kind or (spec.inner if spec.kind == "dot-combined" else spec.kind)
    c = None if spec.weights is None else np.asarray(spec.weights, dtype=float)
    if kind == "lp":
        return lambda y: lp_reg(y, 1.0, c, spec.p)
    if kind == "tv":
        return lambda y: tv_reg(y, adj)
    if kind == "mixed":
        return lambda y: mixed_reg(y, 1.0, c, spec.p, adj, spec.alpha1, spec.alpha2)
    raise RegularizerError(f"unknown inner regularizer {kind!r}")


def dot_reg(q, spec: RegularizerSpec, inner: Callable) -> float:
    """``beta1 R(mu/mu_b) + beta2 R(mus/mus_b)``.

    ``q`` is a :class:`ParameterField` or a ``(D, mu)`` pair of arrays.
    """
    D, mu = (q.D, q.mu) if isinstance(q, ParameterField) else q
    D = np.asarray(D, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if (D <= 0).any():
        raise RegularizerError("D must be positive")
    mus = 1.0 / (3.0 * D) - mu
    return (spec.beta1 * inner(mu / spec.mu_background)
            + spec.beta2 * inner(mus / spec.mus_background))


def make_dot_regularizer(spec: RegularizerSpec, adj: EdgeAdjacency) -> Callable:
    """``(D, mu) -> R`` for the configured kind.

    Plain kinds are applied through the same background normalization as
    ``dot-combined`` so that ``D`` and ``mu`` are penalized on one scale.
    """
    inner = make_inner(spec, adj)
    return lambda D, mu: dot_reg((D, mu), spec, inner)


def graph_laplacian(mesh: Mesh, adj: EdgeAdjacency, free) -> sp.csr_matrix:
    """Edge-length weighted Laplacian on the free triangles, for both blocks.

    Edges between a free and a pinned triangle add ``l`` to the free
    diagonal, which anchors the operator and makes it positive definite
    whenever every free component touches a pinned triangle. Returns the
    ``(2n, 2n)`` block-diagonal matrix ``diag(L, L)``.
    """
    free = np.asarray(free, dtype=np.int64)
    n = len(free)
    pos = np.full(mesh.n_triangles, -1, dtype=np.int64)
    pos[free] = np.arange(n)
    a, b, l = pos[adj.tri_a], pos[adj.tri_b], adj.length
    both = (a >= 0) & (b >= 0)
    one_a = (a >= 0) & (b < 0)
    one_b = (b >= 0) & (a < 0)
    rows = np.concatenate([a[both], b[both], a[both], b[both], a[one_a], b[one_b]])
    cols = np.concatenate([b[both], a[both], a[both], b[both], a[one_a], b[one_b]])
    vals = np.concatenate([-l[both], -l[both], l[both], l[both], l[one_a], l[one_b]])
    L = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    return sp.block_diag([L, L], format="csr")


def regularizer_from_dict(d: dict) -> RegularizerSpec:
    d = dict(d or {})
    if "weights" in d and d["weights"] is not None:
        d["weights"] = tuple(d["weights"])
    return RegularizerSpec(**d)
