"""Ground-truth optical parameter scenes and per-triangle parameter fields."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from matplotlib.path import Path as _MplPath

from .mesh import Mesh

__all__ = [
    "PhantomError",
    "MU_BACKGROUND",
    "MUS_BACKGROUND",
    "D_BACKGROUND",
    "ParameterBounds",
    "Circle",
    "HalfAnnulus",
    "Polygon",
    "Inclusion",
    "Phantom",
    "ParameterField",
    "pinned_mask",
    "rasterize",
    "free_parameter_index",
    "shape_from_dict",
    "phantom_from_dict",
]

MU_BACKGROUND = 0.025  # mm^-1
MUS_BACKGROUND = 2.0  # reduced scattering, mm^-1
D_BACKGROUND = 1.0 / (3.0 * (MU_BACKGROUND + MUS_BACKGROUND))  # mm


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class ParameterBounds:
    """Box constraints ``D_min <= D <= D_max`` and ``0 < mu <= mu_max``."""

    D_min: float = 0.01
    D_max: float = 2.0
    mu_max: float = 1.0

    def __post_init__(self):
        if not (0 < self.D_min < self.D_max) or self.mu_max <= 0:
            raise PhantomError(f"inconsistent bounds {self}")

    def check(self, D, mu, what="field"):
        D = np.asarray(D)
        mu = np.asarray(mu)
        if not np.all(np.isfinite(D)) or not np.all(np.isfinite(mu)):
            raise PhantomError(f"{what}: non-finite parameter values")
        if (D < self.D_min).any() or (D > self.D_max).any():
            raise PhantomError(f"{what}: D outside [{self.D_min}, {self.D_max}]")
        if (mu <= 0).any() or (mu > self.mu_max).any():
            raise PhantomError(f"{what}: mu outside (0, {self.mu_max}]")


# -- shapes ------------------------------------------------------------------

@dataclass(frozen=True)
class Circle:
    center: tuple
    radius: float

    def contains(self, pts):
        d = np.asarray(pts) - np.asarray(self.center, dtype=float)
        return np.hypot(d[:, 0], d[:, 1]) <= self.radius

    @property
    def area(self):
        return np.pi * self.radius ** 2


@dataclass(frozen=True)
class HalfAnnulus:
    """Annular sector ``r_in <= |x - c| <= r_out``, angle in [theta0, theta1] (radians)."""

    center: tuple
    r_in: float
    r_out: float
    theta0: float = 0.0
    theta1: float = np.pi

    def contains(self, pts):
        d = np.asarray(pts) - np.asarray(self.center, dtype=float)
        r = np.hypot(d[:, 0], d[:, 1])
        ang = np.mod(np.arctan2(d[:, 1], d[:, 0]) - self.theta0, 2 * np.pi)
        span = np.mod(self.theta1 - self.theta0, 2 * np.pi) or 2 * np.pi
        return (r >= self.r_in) & (r <= self.r_out) & (ang <= span)


@dataclass(frozen=True)
class Polygon:
    vertices: tuple

    def contains(self, pts):
        return _MplPath(np.asarray(self.vertices, dtype=float)).contains_points(np.asarray(pts))


@dataclass(frozen=True)
class Inclusion:
    shape: object
    D: float
    mu: float


@dataclass(frozen=True)
class Phantom:
    """Background values plus inclusions; later inclusions overwrite earlier ones."""

    D_background: float = D_BACKGROUND
    mu_background: float = MU_BACKGROUND
    inclusions: tuple = ()
    bounds: ParameterBounds = field(default_factory=ParameterBounds)

    def validate(self):
        D = [self.D_background] + [inc.D for inc in self.inclusions]
        mu = [self.mu_background] + [inc.mu for inc in self.inclusions]
        self.bounds.check(D, mu, "phantom")


# -- fields --------------------------------------------------------------------

def pinned_mask(mesh: Mesh, rule: str = "edge") -> np.ndarray:
    """Triangles held at the known boundary background.

    ``"edge"`` pins triangles with an edge on the boundary, ``"node"`` pins
    every triangle owning a boundary node.
    """
    if rule == "node":
        return mesh.boundary_triangles.copy()
    if rule == "edge":
        directed, owner, uniq, inverse, counts = mesh._edge_table
        mask = np.zeros(mesh.n_triangles, dtype=bool)
        mask[owner[counts[inverse] == 1]] = True
        return mask
    if rule == "none":
        return np.zeros(mesh.n_triangles, dtype=bool)
    raise PhantomError(f"unknown pin rule {rule!r}")


@dataclass(frozen=True, eq=False)
class ParameterField:
    """Per-triangle ``(D, mu)`` on a mesh.

    ``pinned`` marks triangles whose values are fixed at
    ``boundary_background`` and excluded from the unknowns.
    """

    mesh: Mesh
    D: np.ndarray
    mu: np.ndarray
    boundary_background: tuple = (D_BACKGROUND, MU_BACKGROUND)
    pinned: Optional[np.ndarray] = None

    def __post_init__(self):
        T = self.mesh.n_triangles
        D = np.array(self.D, dtype=float).reshape(-1)
        mu = np.array(self.mu, dtype=float).reshape(-1)
        if D.shape == (1,):
            D = np.full(T, D[0])
        if mu.shape == (1,):
            mu = np.full(T, mu[0])
        if D.shape != (T,) or mu.shape != (T,):
            raise PhantomError("D and mu need one value per triangle")
        pinned = (np.zeros(T, dtype=bool) if self.pinned is None
                  else np.asarray(self.pinned, dtype=bool).copy())
        D[pinned] = self.boundary_background[0]
        mu[pinned] = self.boundary_background[1]
        for a in (D, mu, pinned):
            a.setflags(write=False)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "pinned", pinned)

    @property
    def mus(self) -> np.ndarray:
        """Reduced scattering ``1/(3D) - mu``."""
        return 1.0 / (3.0 * self.D) - self.mu

    def free_vector(self) -> np.ndarray:
        idx = free_parameter_index(self)
        return np.concatenate([self.D[idx], self.mu[idx]])

    def with_free(self, x) -> "ParameterField":
        """Field with the free entries replaced by ``x = (D_free, mu_free)``."""
        idx = free_parameter_index(self)
        x = np.asarray(x, dtype=float)
        if x.shape != (2 * len(idx),):
            raise PhantomError(f"expected {2 * len(idx)} free values, got {x.shape}")
        D = self.D.copy()
        mu = self.mu.copy()
        D[idx] = x[: len(idx)]
        mu[idx] = x[len(idx):]
        return ParameterField(self.mesh, D, mu, self.boundary_background, self.pinned)

    def with_values(self, D, mu) -> "ParameterField":
        return ParameterField(self.mesh, D, mu, self.boundary_background, self.pinned)


def free_parameter_index(field: ParameterField) -> np.ndarray:
    """Ordered indices of the unpinned triangles."""
    return np.flatnonzero(~field.pinned)


def rasterize(phantom: Phantom, mesh: Mesh, known_boundary: bool = True,
              pin_rule: str = "edge") -> ParameterField:
    """Assign each triangle the value of the last inclusion containing its centroid."""
    phantom.validate()
    D = np.full(mesh.n_triangles, float(phantom.D_background))
    mu = np.full(mesh.n_triangles, float(phantom.mu_background))
    c = mesh.centroids
    for inc in phantom.inclusions:
        inside = inc.shape.contains(c)
        D[inside] = inc.D
        mu[inside] = inc.mu
    pinned = pinned_mask(mesh, pin_rule) if known_boundary else None
    return ParameterField(mesh, D, mu, (phantom.D_background, phantom.mu_background), pinned)


# -- config parsing -----------------------------------------------------------

def shape_from_dict(d: dict):
    kind = d.get("shape")
    if kind == "circle":
        return Circle(tuple(d["center"]), float(d["radius"]))
    if kind in ("half-annulus", "half_annulus"):
        return HalfAnnulus(tuple(d["center"]), float(d["r_in"]), float(d["r_out"]),
                           float(d.get("theta0", 0.0)), float(d.get("theta1", np.pi)))
    if kind == "polygon":
        return Polygon(tuple(tuple(v) for v in d["vertices"]))
    raise PhantomError(f"unknown shape {kind!r}")


def phantom_from_dict(d: dict, bounds: Optional[ParameterBounds] = None) -> Phantom:
    """Build a phantom from a config section.

    Inclusion values default to twice the background ``mu`` and half the
    background ``D``.
    """
    d = dict(d or {})
    D_bg = float(d.get("D_background", D_BACKGROUND))
    mu_bg = float(d.get("mu_background", MU_BACKGROUND))
    incs = []
    for rec in d.get("inclusions", []) or []:
        incs.append(Inclusion(shape_from_dict(rec),
                              float(rec.get("D", 0.5 * D_bg)),
                              float(rec.get("mu", 2.0 * mu_bg))))
    ph = Phantom(D_bg, mu_bg, tuple(incs), bounds or ParameterBounds())
    ph.validate()
    return ph
