"""Frequency-domain diffusion forward solver (P1 elements, P0 parameters).

Solves the Neumann problem

    -div(D grad u) + (mu + i k) u = 0   in the domain,
    D du/dn = f                         on the boundary,

and returns the Dirichlet trace of ``u`` on the boundary nodes.

Measurement vectors are flattened source-major, boundary-node-minor, with
the real part before the imaginary part of each node::

    [Re g(s0,b0), Im g(s0,b0), Re g(s0,b1), Im g(s0,b1), ..., Im g(sS,bB)]
"""

from __future__ import annotations

import csv
import json
import weakref
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import Mesh

__all__ = [
    "ForwardError",
    "DEFAULT_K",
    "wavenumber",
    "SourceBank",
    "trig_sources",
    "ForwardSystem",
    "assemble",
    "load_vector",
    "solve_forward",
    "measure",
    "MeasurementSet",
    "forward_map",
    "FLATTENING",
]

FLATTENING = "source-major, boundary-node-minor, real-then-imaginary"


class ForwardError(RuntimeError):
    pass


def wavenumber(frequency_hz: float = 100e6, c_mm_per_ps: float = 0.214) -> float:
    """``k = omega / c`` in mm^-1."""
    return 2.0 * np.pi * frequency_hz / (c_mm_per_ps * 1e12)


DEFAULT_K = wavenumber()


# -- element data, cached per mesh -----------------------------------------

class _Elements:
    def __init__(self, mesh: Mesh):
        G = mesh.basis_gradients
        area = mesh.areas
        self.stiff = area[:, None, None] * np.einsum("tik,tjk->tij", G, G)  # (T,3,3)
        ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
        self.mass = area[:, None, None] * ref  # (T,3,3)
        t = mesh.triangles
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        n = mesh.n_nodes
        key = cols * n + rows  # column-major ordering
        uniq, self.slot = np.unique(key, return_inverse=True)
        self.slot = self.slot.ravel()
        self.indices = (uniq % n).astype(np.int32)
        ucols = uniq // n
        self.indptr = np.searchsorted(ucols, np.arange(n + 1)).astype(np.int32)
        self.nnz = len(uniq)
        self.n = n


_ELEMENT_CACHE: "weakref.WeakKeyDictionary[Mesh, _Elements]" = weakref.WeakKeyDictionary()


def _elements(mesh: Mesh) -> _Elements:
    el = _ELEMENT_CACHE.get(mesh)
    if el is None:
        el = _ELEMENT_CACHE[mesh] = _Elements(mesh)
    return el


# -- sources -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SourceBank:
    """Neumann boundary data, one row per source.

    ``values[s, j]`` is the flux of source ``s`` at the ``j``-th boundary node
    in canonical loop order; the flux on each boundary edge is the linear
    interpolant of its endpoint values.
    """

    values: np.ndarray
    description: str = "custom"

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if v.shape[0] < 1:
            raise ForwardError("a source bank needs at least one source")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]

    def scaled(self, factor) -> "SourceBank":
        return SourceBank(self.values * factor, f"{factor} x ({self.description})")


def trig_sources(mesh: Mesh, count: int = 16, center=None) -> SourceBank:
    """Trigonometric patterns ``cos(n theta), sin(n theta)`` with
    ``n = ceil(j/2)`` for ``j = 1..count``."""
    pts = mesh.nodes[mesh.boundary_nodes]
    c = pts.mean(axis=0) if center is None else np.asarray(center, dtype=float)
    theta = np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0])
    rows = []
    for j in range(1, count + 1):
        n = (j + 1) // 2
        rows.append(np.cos(n * theta) if j % 2 else np.sin(n * theta))
    return SourceBank(np.array(rows), f"trig count={count}")


def load_vector(mesh: Mesh, f) -> np.ndarray:
    """``b_a = int_boundary f phi_a`` with edge-wise trapezoidal quadrature.

    ``f`` holds nodal flux values in canonical boundary order, shape (Nb,) or
    (S, Nb); the result has shape (N,) or (N, S).
    """
    f = np.asarray(f, dtype=float)
    single = f.ndim == 1
    f2 = np.atleast_2d(f)
    bn = mesh.boundary_nodes
    if f2.shape[1] != len(bn):
        raise ForwardError(f"source has {f2.shape[1]} values, expected {len(bn)}")
    nodal = np.zeros((mesh.n_nodes, f2.shape[0]))
    nodal[bn] = f2.T
    e = mesh.boundary_edges
    half = 0.5 * np.linalg.norm(mesh.nodes[e[:, 0]] - mesh.nodes[e[:, 1]], axis=1)
    b = np.zeros_like(nodal)
    np.add.at(b, e[:, 0], half[:, None] * nodal[e[:, 0]])
    np.add.at(b, e[:, 1], half[:, None] * nodal[e[:, 1]])
    return b[:, 0] if single else b


# -- system ------------------------------------------------------------------

class ForwardSystem:
    """Assembled complex-symmetric system ``A = K(D) + M(mu + i k)``.

    The LU factorization is computed on first use and reused for every
    solve afterwards.
    """

    def __init__(self, mesh: Mesh, matrix: sp.csc_matrix, k: float, D, mu):
        self.mesh = mesh
        self.matrix = matrix
        self.k = float(k)
        self.D = D
        self.mu = mu

    @cached_property
    def lu(self):
        if self.k == 0 and not np.any(self.mu > 0):
            raise ForwardError("singular system: mu == 0 everywhere and k == 0")
        try:
            return splu(self.matrix)
        except RuntimeError as exc:
            raise ForwardError(f"factorization failed: {exc}") from exc

    def solve(self, b, check: bool = True):
        b = np.asarray(b)
        if not np.any(b):
            return np.zeros(b.shape, dtype=complex)
        u = self.lu.solve(b.astype(complex))
        if check:
            res = self.matrix @ u - b
            rel = np.linalg.norm(res) / np.linalg.norm(b)
            if not rel <= 1e-10:
                raise ForwardError(f"linear solve residual {rel:.2e} exceeds 1e-10")
        return u


def _coefficients(mesh, field_or_D, mu=None):
    if mu is None:
        return np.asarray(field_or_D.D, dtype=float), np.asarray(field_or_D.mu, dtype=float)
    T = mesh.n_triangles
    return (np.broadcast_to(np.asarray(field_or_D, dtype=float), (T,)),
            np.broadcast_to(np.asarray(mu, dtype=float), (T,)))


def assemble(mesh: Mesh, q, k: float = DEFAULT_K, mu=None, bounds=None) -> ForwardSystem:
    """Assemble the system matrix.

    ``q`` is a :class:`~dotrecon.phantom.ParameterField`, or per-triangle
    ``D`` values when ``mu`` is passed separately.
    """
    D, mu_v = _coefficients(mesh, q, mu)
    if not (np.all(np.isfinite(D)) and np.all(np.isfinite(mu_v))):
        raise ForwardError("non-finite coefficients")
    if (D <= 0).any():
        raise ForwardError("D must be positive")
    if (mu_v < 0).any():
        raise ForwardError("mu must be non-negative")
    if k < 0:
        raise ForwardError("k must be non-negative")
    if bounds is not None:
        bounds.check(D, mu_v)
    el = _elements(mesh)
    vals = (D[:, None, None] * el.stiff).ravel() + ((mu_v + 1j * k)[:, None, None] * el.mass).ravel()
    data = (np.bincount(el.slot, vals.real, el.nnz)
            + 1j * np.bincount(el.slot, vals.imag, el.nnz))
    A = sp.csc_matrix((data, el.indices, el.indptr), shape=(el.n, el.n))
    return ForwardSystem(mesh, A, k, D, mu_v)


def solve_forward(system: ForwardSystem, f) -> np.ndarray:
    """Nodal field for Neumann data ``f`` (canonical boundary order)."""
    return system.solve(load_vector(system.mesh, f))


def measure(u, mesh: Mesh) -> np.ndarray:
    """Dirichlet trace: ``u`` at the boundary nodes in canonical order."""
    u = np.asarray(u)
    if u.shape[0] != mesh.n_nodes:
        raise ForwardError("field length does not match the mesh")
    return u[mesh.boundary_nodes]


# -- measurements ---------------------------------------------------------------

@dataclass(eq=False)
class MeasurementSet:
    """Complex boundary traces, shape (S, Nb), with an optional noise model.

    ``sigma`` is the per-entry standard deviation of the flattened real
    vector (diagonal covariance ``C = diag(sigma**2)``).
    """

    traces: np.ndarray
    k: float = DEFAULT_K
    source_description: str = ""
    sigma: Optional[np.ndarray] = None
    noise: dict = field(default_factory=dict)

    @property
    def vector(self) -> np.ndarray:
        t = np.asarray(self.traces)
        return np.stack([t.real, t.imag], axis=-1).reshape(-1)

    def __len__(self):
        return 2 * self.traces.size

    @staticmethod
    def unflatten(vector, n_sources):
        v = np.asarray(vector, dtype=float).reshape(n_sources, -1, 2)
        return v[..., 0] + 1j * v[..., 1]

    def with_vector(self, vector, sigma=None, noise=None) -> "MeasurementSet":
        return MeasurementSet(self.unflatten(vector, self.traces.shape[0]), self.k,
                              self.source_description,
                              self.sigma if sigma is None else np.asarray(sigma, dtype=float),
                              dict(self.noise if noise is None else noise))

    @property
    def covariance_diagonal(self):
        return None if self.sigma is None else self.sigma ** 2

    def metadata(self) -> dict:
        return {
            "k": self.k,
            "sources": self.source_description,
            "n_sources": int(self.traces.shape[0]),
            "n_boundary_nodes": int(self.traces.shape[1]),
            "flattening": FLATTENING,
            "noise": self.noise,
            "sigma": None if self.sigma is None else [float(s) for s in self.sigma],
        }

    def to_csv(self, path, boundary_nodes=None) -> None:
        """Write ``source,node,re,im`` rows plus a ``.json`` sidecar."""
        path = Path(path)
        S, Nb = self.traces.shape
        nodes = np.arange(Nb) if boundary_nodes is None else np.asarray(boundary_nodes)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "node", "re", "im"])
            for s in range(S):
                for j in range(Nb):
                    z = self.traces[s, j]
                    w.writerow([s, int(nodes[j]), repr(float(z.real)), repr(float(z.imag))])
        path.with_suffix(".json").write_text(json.dumps(self.metadata(), indent=1))

    @classmethod
    def from_csv(cls, path) -> "MeasurementSet":
        path = Path(path)
        rows = {}
        with path.open(newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header != ["source", "node", "re", "im"]:
                raise ForwardError(f"unexpected header {header}")
            for s, _node, re, im in r:
                rows.setdefault(int(s), []).append(float(re) + 1j * float(im))
        traces = np.array([rows[s] for s in sorted(rows)])
        meta = {}
        side = path.with_suffix(".json")
        if side.exists():
            meta = json.loads(side.read_text())
        sigma = meta.get("sigma")
        return cls(traces, meta.get("k", DEFAULT_K), meta.get("sources", ""),
                   None if sigma is None else np.array(sigma), meta.get("noise", {}) or {})


def forward_map(mesh: Mesh, q, k: float, sources: SourceBank, system: ForwardSystem = None) -> MeasurementSet:
    """Solve for every source against one factorization and return the traces."""
    if system is None:
        system = assemble(mesh, q, k)
    B = load_vector(mesh, sources.values)
    U = system.solve(B)
    return MeasurementSet(U[mesh.boundary_nodes].T.copy(), k, sources.description)
