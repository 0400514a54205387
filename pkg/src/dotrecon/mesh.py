"""Triangular meshes: loading, generation, adjacency and inter-mesh transfer.

A :class:`Mesh` is immutable. Derived quantities (areas, centroids, edge
tables, the canonical boundary node ordering) are computed lazily and cached.

Mesh text format (``dotmesh 1``)::

    dotmesh 1
    # comment
    nodes N
    x y            (N lines)
    triangles T
    i j k          (T lines, 0-based)
    boundary B     (optional)
    i j            (B lines)
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "MeshError",
    "Mesh",
    "EdgeAdjacency",
    "load_mesh",
    "save_mesh",
    "generate_disk_mesh",
    "refine",
    "disk_projection",
    "edge_adjacency",
    "locate_points",
    "transfer_field",
    "boundary_interpolation",
]


class MeshError(ValueError):
    """Raised for malformed mesh files or meshes violating an invariant."""


def _signed_areas(nodes, triangles):
    p0 = nodes[triangles[:, 0]]
    p1 = nodes[triangles[:, 1]]
    p2 = nodes[triangles[:, 2]]
    return 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                  - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Planar triangulation with counter-clockwise triangles.

    Parameters
    ----------
    nodes : (N, 2) array
        Node coordinates.
    triangles : (T, 3) int array
        Node indices of each triangle, counter-clockwise.
    boundary_edges : (B, 2) int array, optional
        Boundary edges. Recomputed from the connectivity when omitted; when
        given they must match the recomputed set.
    region_labels : (T,) int array, optional
        Free per-triangle tags.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: Optional[np.ndarray] = None
    region_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=float)
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshError("nodes must have shape (N, 2)")
        if tris.ndim != 2 or tris.shape[1] != 3 or len(tris) == 0:
            raise MeshError("triangles must have shape (T, 3) with T >= 1")
        bad = np.flatnonzero((tris < 0).any(axis=1) | (tris >= len(nodes)).any(axis=1))
        if bad.size:
            raise MeshError(f"triangle {bad[0]} has a node index out of range")
        area = _signed_areas(nodes, tris)
        bad = np.flatnonzero(area <= 0)
        if bad.size:
            raise MeshError(f"triangle {bad[0]} has non-positive signed area {area[bad[0]]:g}")
        nodes.setflags(write=False)
        tris.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "triangles", tris)

        computed = self._oriented_boundary_edges()
        if self.boundary_edges is not None:
            given = np.asarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
            if ((given < 0) | (given >= len(nodes))).any():
                i = int(np.flatnonzero(((given < 0) | (given >= len(nodes))).any(axis=1))[0])
                raise MeshError(f"boundary edge {i} has a node index out of range")
            key = lambda e: set(map(tuple, np.sort(e, axis=1).tolist()))
            if key(given) != key(computed) or len(given) != len(computed):
                raise MeshError("stored boundary edges do not match the connectivity")
        computed.setflags(write=False)
        object.__setattr__(self, "boundary_edges", computed)

        if self.region_labels is not None:
            labels = np.asarray(self.region_labels, dtype=np.int64)
            if labels.shape != (len(tris),):
                raise MeshError("region_labels must have one entry per triangle")
            object.__setattr__(self, "region_labels", labels)

        deg = np.bincount(computed.ravel(), minlength=len(nodes))
        odd = np.flatnonzero((deg != 0) & (deg != 2))
        if odd.size:
            raise MeshError(f"boundary is not a union of simple closed loops at node {odd[0]}")

    # -- edges ----------------------------------------------------------
    @cached_property
    def _edge_table(self):
        t = self.triangles
        # local edge e is opposite local vertex e
        local = np.array([[1, 2], [2, 0], [0, 1]])
        directed = t[:, local].reshape(-1, 2)  # (3T, 2), in triangle orientation
        owner = np.repeat(np.arange(len(t)), 3)
        keys = np.sort(directed, axis=1)
        uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.ravel()
        if (counts > 2).any():
            e = int(np.flatnonzero(counts > 2)[0])
            raise MeshError(f"edge {tuple(uniq[e])} is shared by more than two triangles")
        return directed, owner, uniq, inverse, counts

    def _oriented_boundary_edges(self):
        directed, owner, uniq, inverse, counts = self._edge_table
        on_boundary = counts[inverse] == 1
        return directed[on_boundary].copy()

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def areas(self) -> np.ndarray:
        return _signed_areas(self.nodes, self.triangles)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @cached_property
    def n_interior_edges(self) -> int:
        counts = self._edge_table[4]
        return int((counts == 2).sum())

    @cached_property
    def boundary_loops(self) -> list:
        """Boundary node loops, each following the counter-clockwise edge
        orientation and starting at its smallest node index."""
        succ = {int(a): int(b) for a, b in self.boundary_edges}
        loops = []
        remaining = set(succ)
        while remaining:
            start = min(remaining)
            loop = [start]
            nxt = succ[start]
            while nxt != start:
                loop.append(nxt)
                nxt = succ[nxt]
            remaining.difference_update(loop)
            loops.append(np.array(loop, dtype=np.int64))
        return loops

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        """Boundary nodes in canonical loop order."""
        out = np.concatenate(self.boundary_loops)
        out.setflags(write=False)
        return out

    @cached_property
    def boundary_triangles(self) -> np.ndarray:
        """Mask of triangles owning at least one boundary node."""
        on = np.zeros(self.n_nodes, dtype=bool)
        on[self.boundary_edges.ravel()] = True
        return on[self.triangles].any(axis=1)

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """Gradients of the three P1 basis functions on each triangle, (T, 3, 2)."""
        p = self.nodes[self.triangles]
        two_a = 2.0 * self.areas
        # grad phi_i = rot90(p_{i+2} - p_{i+1}) / (2A)
        e = p[:, [2, 0, 1]] - p[:, [1, 2, 0]]
        grads = np.stack([-e[..., 1], e[..., 0]], axis=-1)
        return grads / two_a[:, None, None]


@dataclass(frozen=True)
class EdgeAdjacency:
    """Interior edges as (triangle_a, triangle_b, length) with the shared node pair."""

    tri_a: np.ndarray
    tri_b: np.ndarray
    length: np.ndarray
    nodes: np.ndarray

    def __len__(self):
        return len(self.length)


def edge_adjacency(mesh: Mesh) -> EdgeAdjacency:
    """Return one entry per interior edge, with the shared edge length."""
    directed, owner, uniq, inverse, counts = mesh._edge_table
    interior = np.flatnonzero(counts == 2)
    order = np.argsort(inverse, kind="stable")
    # every interior edge appears twice consecutively in sorted order
    starts = np.searchsorted(inverse[order], interior)
    ta = owner[order[starts]]
    tb = owner[order[starts + 1]]
    nodes = uniq[interior]
    length = np.linalg.norm(mesh.nodes[nodes[:, 0]] - mesh.nodes[nodes[:, 1]], axis=1)
    return EdgeAdjacency(tri_a=ta, tri_b=tb, length=length, nodes=nodes)


# -- IO ------------------------------------------------------------------

def load_mesh(path) -> Mesh:
    """Read a ``dotmesh 1`` file. Clockwise triangles are reoriented."""
    lines = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    if not lines or lines[0].split() != ["dotmesh", "1"]:
        raise MeshError("missing 'dotmesh 1' header")
    pos = 1

    def section(name):
        nonlocal pos
        if pos >= len(lines):
            raise MeshError(f"missing '{name}' section")
        head = lines[pos].split()
        if len(head) != 2 or head[0] != name:
            raise MeshError(f"expected '{name} <count>', got {lines[pos]!r}")
        try:
            count = int(head[1])
        except ValueError:
            raise MeshError(f"bad count in {lines[pos]!r}") from None
        rows = lines[pos + 1: pos + 1 + count]
        if len(rows) != count:
            raise MeshError(f"section '{name}' is truncated")
        pos += 1 + count
        return rows

    def parse(rows, width, kind, name):
        try:
            arr = np.array([[kind(v) for v in r.split()] for r in rows], dtype=kind)
        except ValueError as exc:
            raise MeshError(f"cannot parse {name}: {exc}") from None
        if len(rows) and (arr.ndim != 2 or arr.shape[1] != width):
            raise MeshError(f"{name} rows must have {width} entries")
        return arr.reshape(-1, width)

    nodes = parse(section("nodes"), 2, float, "nodes")
    tris = parse(section("triangles"), 3, int, "triangles")
    boundary = None
    if pos < len(lines):
        boundary = parse(section("boundary"), 2, int, "boundary")
    if pos < len(lines):
        raise MeshError(f"unexpected content: {lines[pos]!r}")

    if ((tris < 0) | (tris >= len(nodes))).any():
        i = int(np.flatnonzero(((tris < 0) | (tris >= len(nodes))).any(axis=1))[0])
        raise MeshError(f"triangle {i} has a node index out of range")
    area = _signed_areas(nodes, tris)
    tris = tris.copy()
    flip = area < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return Mesh(nodes, tris, boundary_edges=boundary)


def save_mesh(mesh: Mesh, path) -> None:
    out = ["dotmesh 1", f"nodes {mesh.n_nodes}"]
    out += [f"{x!r} {y!r}" for x, y in mesh.nodes.tolist()]
    out.append(f"triangles {mesh.n_triangles}")
    out += ["{} {} {}".format(*t) for t in mesh.triangles.tolist()]
    out.append(f"boundary {len(mesh.boundary_edges)}")
    out += ["{} {}".format(*e) for e in mesh.boundary_edges.tolist()]
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


# -- generation ------------------------------------------------------------

def _ring_layout(target):
    # k * nr**2 triangles for k nodes in the first ring and nr rings
    best = None
    for k in range(4, 13):
        nr = max(1, int(round(np.sqrt(target / k))))
        for cand in (nr - 1, nr, nr + 1):
            if cand < 1:
                continue
            err = abs(k * cand ** 2 - target) / target + 0.03 * abs(k - 6)
            if best is None or err < best[0]:
                best = (err, k, cand)
    return best[1], best[2]


def generate_disk_mesh(radius: float, target_triangle_count: int, seed: int = 0,
                       jitter: float = 0.15, grading: float = 1.4) -> Mesh:
    """Concentric-ring triangulation of a disk.

    Ring ``i`` carries ``k*i`` nodes, giving ``k*nr**2`` triangles; ``k`` and
    ``nr`` are chosen to match the target count. Ring radii follow
    ``R * (1 - (1 - i/nr)**grading)``, so ``grading > 1`` packs rings toward
    the boundary where the boundary data are most sensitive. Interior nodes
    are jittered by a fraction ``jitter`` of the local spacing; boundary
    nodes lie exactly on the circle.
    """
    if grading < 1:
        raise MeshError("grading must be >= 1")
    if radius <= 0:
        raise MeshError("radius must be positive")
    if target_triangle_count < 4:
        raise MeshError("target_triangle_count must be at least 4")
    k, nr = _ring_layout(target_triangle_count)
    rng = np.random.default_rng(seed)
    radii = radius * (1.0 - (1.0 - np.arange(nr + 1) / nr) ** grading)
    radii[-1] = radius
    gaps = np.diff(radii)

    pts = [np.zeros((1, 2))]
    rings = [np.array([0])]
    count = 1
    for i in range(1, nr + 1):
        n = k * i
        theta = 2.0 * np.pi * np.arange(n) / n
        r = np.full(n, radii[i])
        if i < nr and jitter > 0:
            dr = min(gaps[i - 1], gaps[i])
            r = r + jitter * dr * rng.uniform(-1.0, 1.0, n)
            theta = theta + jitter * (2.0 * np.pi / n) * rng.uniform(-1.0, 1.0, n)
        pts.append(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
        rings.append(np.arange(count, count + n))
        count += n
    nodes = np.vstack(pts)

    tris = []
    outer = rings[1]
    for q in range(len(outer)):
        tris.append((0, outer[q], outer[(q + 1) % len(outer)]))
    for i in range(1, nr):
        inner, outer = rings[i], rings[i + 1]
        a, b = len(inner), len(outer)
        p = q = 0
        while p < a or q < b:
            # advance along whichever ring has the smaller next nominal angle
            if q < b and (p == a or (q + 1) * a <= (p + 1) * b):
                tris.append((inner[p % a], outer[q], outer[(q + 1) % b]))
                q += 1
            else:
                tris.append((inner[p], outer[q % b], inner[(p + 1) % a]))
                p += 1
    tris = np.array(tris, dtype=np.int64)
    area = _signed_areas(nodes, tris)
    tris[area < 0] = tris[area < 0][:, [0, 2, 1]]
    return Mesh(nodes, tris)


def disk_projection(radius: float, center=(0.0, 0.0)) -> Callable[[np.ndarray], np.ndarray]:
    """Map points radially onto the circle of the given radius."""
    c = np.asarray(center, dtype=float)

    def project(points):
        d = points - c
        return c + radius * d / np.linalg.norm(d, axis=1, keepdims=True)

    return project


def refine(mesh: Mesh, boundary_projection: Optional[Callable] = None) -> Mesh:
    """Split every triangle into four through its edge midpoints.

    ``boundary_projection`` maps new boundary midpoints onto the curved
    boundary when given (see :func:`disk_projection`).
    """
    directed, owner, uniq, inverse, counts = mesh._edge_table
    mids = 0.5 * (mesh.nodes[uniq[:, 0]] + mesh.nodes[uniq[:, 1]])
    if boundary_projection is not None:
        on_b = counts == 1
        mids[on_b] = boundary_projection(mids[on_b])
    nodes = np.vstack([mesh.nodes, mids])
    m = mesh.n_nodes + inverse.reshape(-1, 3)  # midpoint opposite local vertex 0, 1, 2
    t = mesh.triangles
    new = np.concatenate([
        np.column_stack([t[:, 0], m[:, 2], m[:, 1]]),
        np.column_stack([m[:, 2], t[:, 1], m[:, 0]]),
        np.column_stack([m[:, 1], m[:, 0], t[:, 2]]),
        np.column_stack([m[:, 0], m[:, 1], m[:, 2]]),
    ])
    labels = None if mesh.region_labels is None else np.tile(mesh.region_labels, 4)
    return Mesh(nodes, new, region_labels=labels)


# -- point location and transfer -------------------------------------------

def _barycentric(mesh, tri_idx, pts):
    p = mesh.nodes[mesh.triangles[tri_idx]]  # (..., 3, 2)
    v0 = p[..., 1, :] - p[..., 0, :]
    v1 = p[..., 2, :] - p[..., 0, :]
    w = pts - p[..., 0, :]
    det = v0[..., 0] * v1[..., 1] - v0[..., 1] * v1[..., 0]
    l1 = (w[..., 0] * v1[..., 1] - w[..., 1] * v1[..., 0]) / det
    l2 = (v0[..., 0] * w[..., 1] - v0[..., 1] * w[..., 0]) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def _point_segment_dist(pts, a, b):
    ab = b - a
    t = np.clip(((pts - a) * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
    return np.linalg.norm(pts - (a + t[..., None] * ab), axis=-1)


def locate_points(mesh: Mesh, points, n_candidates: int = 16, tol: float = 1e-12):
    """Index of the triangle containing each point.

    Returns ``(index, inside)``. Points outside the mesh get the nearest
    triangle (by Euclidean distance) and ``inside=False``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    kq = min(n_candidates, mesh.n_triangles)
    tree = cKDTree(mesh.centroids)
    _, cand = tree.query(pts, k=kq)
    cand = np.asarray(cand).reshape(len(pts), kq)
    lam = _barycentric(mesh, cand, pts[:, None, :])
    inside_c = (lam >= -tol).all(axis=-1)
    # lowest candidate rank that contains the point
    found = inside_c.any(axis=1)
    first = np.argmax(inside_c, axis=1)
    index = cand[np.arange(len(pts)), first]
    inside = found.copy()

    missing = np.flatnonzero(~found)
    if missing.size:
        allt = np.arange(mesh.n_triangles)
        for i in missing:
            lam_all = _barycentric(mesh, allt, pts[i][None, :])
            hit = np.flatnonzero((lam_all >= -tol).all(axis=-1))
            if hit.size:
                index[i], inside[i] = hit[0], True
                continue
            tri = mesh.nodes[mesh.triangles]
            d = np.min(np.stack([
                _point_segment_dist(pts[i], tri[:, 0], tri[:, 1]),
                _point_segment_dist(pts[i], tri[:, 1], tri[:, 2]),
                _point_segment_dist(pts[i], tri[:, 2], tri[:, 0]),
            ]), axis=0)
            index[i] = int(np.argmin(d))
    return index, inside


def transfer_field(src: Mesh, values, dst: Mesh) -> np.ndarray:
    """Sample a per-triangle field of ``src`` at the centroids of ``dst``.

    ``values`` may be (T_src,) or (T_src, k).
    """
    if src.n_triangles == 0:
        raise MeshError("empty source mesh")
    values = np.asarray(values)
    if values.shape[0] != src.n_triangles:
        raise MeshError("field length does not match the source mesh")
    idx, _ = locate_points(src, dst.centroids)
    return values[idx].copy()


def boundary_interpolation(src: Mesh, dst: Mesh) -> np.ndarray:
    """Matrix ``P`` with ``trace_dst = P @ trace_src`` for boundary traces.

    Each boundary node of ``dst`` is projected onto the closest boundary edge
    of ``src`` and the trace is interpolated linearly along that edge. Both
    traces are in canonical boundary order.
    """
    pos = {int(n): i for i, n in enumerate(src.boundary_nodes)}
    e = src.boundary_edges
    a = src.nodes[e[:, 0]]
    b = src.nodes[e[:, 1]]
    ab = b - a
    pts = dst.nodes[dst.boundary_nodes]
    t = np.clip(((pts[:, None, :] - a) * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
    d = np.linalg.norm(pts[:, None, :] - (a + t[..., None] * ab), axis=-1)
    best = np.argmin(d, axis=1)
    tb = t[np.arange(len(pts)), best]
    P = np.zeros((len(pts), len(src.boundary_nodes)))
    rows = np.arange(len(pts))
    np.add.at(P, (rows, [pos[int(n)] for n in e[best, 0]]), 1.0 - tb)
    np.add.at(P, (rows, [pos[int(n)] for n in e[best, 1]]), tb)
    return P
