import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dotrecon.mesh import (
    Mesh,
    MeshError,
    boundary_interpolation,
    disk_projection,
    edge_adjacency,
    generate_disk_mesh,
    load_mesh,
    locate_points,
    refine,
    save_mesh,
    transfer_field,
)
from oracles import brute_force_edges


def write(tmp_path, text):
    p = tmp_path / "m.mesh"
    p.write_text(text)
    return p


# -- load_mesh -----------------------------------------------------------------

def test_load_single_triangle(tmp_path):
    m = load_mesh(write(tmp_path, "dotmesh 1\nnodes 3\n0 0\n1 0\n0 1\ntriangles 1\n0 1 2\n"))
    assert m.n_triangles == 1
    assert len(m.boundary_edges) == 3
    assert m.n_interior_edges == 0


def test_load_two_triangles_counts(tmp_path):
    text = "dotmesh 1\n# square\nnodes 4\n0 0\n1 0\n1 1\n0 1\ntriangles 2\n0 1 2\n0 2 3\n"
    m = load_mesh(write(tmp_path, text))
    assert len(m.boundary_edges) == 4
    assert m.n_interior_edges == 1


def test_load_reorients_clockwise_triangle(tmp_path):
    m = load_mesh(write(tmp_path, "dotmesh 1\nnodes 3\n0 0\n1 0\n0 1\ntriangles 1\n0 2 1\n"))
    assert m.areas[0] == pytest.approx(0.5)


@pytest.mark.parametrize("text, match", [
    ("nodes 3\n0 0\n1 0\n0 1\ntriangles 1\n0 1 2\n", "header"),
    ("dotmesh 1\nnodes 3\n0 0\n1 0\ntriangles 1\n0 1 2\n", "triangles"),
    ("dotmesh 1\nnodes 3\n0 0\n1 0\n0 1\ntriangles 1\n0 1 5\n", "triangle 0"),
    ("dotmesh 1\nnodes 3\n0 0\n1 0\n2 0\ntriangles 1\n0 1 2\n", "triangle 0"),
    ("dotmesh 1\nnodes 3\n0 0\n1 0\n0 1\ntriangles 1\n0 1 2\nboundary 1\n0 1\n", "boundary"),
    ("dotmesh 1\nnodes 3\n0 0\n1 x\n0 1\ntriangles 1\n0 1 2\n", "parse"),
])
def test_load_errors(tmp_path, text, match):
    with pytest.raises(MeshError, match=match):
        load_mesh(write(tmp_path, text))


def test_non_manifold_boundary_rejected():
    # two triangles touching at a single vertex: that vertex has boundary degree 4
    nodes = np.array([[0, 0], [1, 0], [0, 1], [-1, 0], [0, -1]], dtype=float)
    with pytest.raises(MeshError, match="closed loops"):
        Mesh(nodes, np.array([[0, 1, 2], [0, 3, 4]]))


def test_save_load_round_trip(tmp_path, coarse_mesh):
    p = tmp_path / "c.mesh"
    save_mesh(coarse_mesh, p)
    m = load_mesh(p)
    assert np.array_equal(m.nodes, coarse_mesh.nodes)
    assert np.array_equal(m.triangles, coarse_mesh.triangles)
    assert np.array_equal(m.boundary_nodes, coarse_mesh.boundary_nodes)


# -- generate_disk_mesh ---------------------------------------------------------

@pytest.mark.parametrize("target", [541, 2097])
def test_disk_count_within_20_percent(target):
    m = generate_disk_mesh(25.0, target, seed=0)
    assert 0.8 * target <= m.n_triangles <= 1.2 * target


def test_disk_deterministic():
    a = generate_disk_mesh(25.0, 541, seed=3)
    b = generate_disk_mesh(25.0, 541, seed=3)
    assert np.array_equal(a.nodes, b.nodes) and np.array_equal(a.triangles, b.triangles)


def test_disk_seed_changes_interior():
    a = generate_disk_mesh(25.0, 541, seed=3)
    b = generate_disk_mesh(25.0, 541, seed=4)
    assert not np.array_equal(a.nodes, b.nodes)


def test_disk_boundary_on_circle(coarse_mesh, fine_mesh):
    for m in (coarse_mesh, fine_mesh):
        r = np.hypot(*m.nodes[m.boundary_nodes].T)
        assert np.all(np.abs(r - 25.0) <= 0.02 * 25.0)
        assert len(m.boundary_loops) == 1


def test_disk_too_small():
    with pytest.raises(MeshError):
        generate_disk_mesh(1.0, 3)
    with pytest.raises(MeshError):
        generate_disk_mesh(-1.0, 100)


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 800), st.integers(0, 2**16))
def test_disk_invariants_hold(target, seed):
    m = generate_disk_mesh(5.0, target, seed)
    assert np.all(m.areas > 0)
    assert 2 * m.n_interior_edges + len(m.boundary_edges) == 3 * m.n_triangles
    loop = m.nodes[m.boundary_loops[0]]
    x, y = loop.T
    polygon = 0.5 * (x @ np.roll(y, -1) - y @ np.roll(x, -1))
    assert m.areas.sum() == pytest.approx(polygon, rel=1e-10)
    assert polygon <= np.pi * 25.0


# -- edge_adjacency ---------------------------------------------------------------

def test_adjacency_single_triangle():
    m = Mesh(np.array([[0, 0], [1, 0], [0, 1]], dtype=float), np.array([[0, 1, 2]]))
    assert len(edge_adjacency(m)) == 0


def test_adjacency_shared_diagonal(two_triangles):
    adj = edge_adjacency(two_triangles)
    assert len(adj) == 1
    assert adj.length[0] == pytest.approx(np.sqrt(2))
    assert {adj.tri_a[0], adj.tri_b[0]} == {0, 1}


def test_adjacency_matches_brute_force(coarse_mesh):
    adj = edge_adjacency(coarse_mesh)
    assert len(adj) == (3 * coarse_mesh.n_triangles - len(coarse_mesh.boundary_edges)) // 2
    owners = brute_force_edges(coarse_mesh.triangles)
    ref = {e: sorted(t) for e, t in owners.items() if len(t) == 2}
    got = {tuple(sorted(n)): sorted((a, b)) for n, a, b in zip(adj.nodes.tolist(), adj.tri_a, adj.tri_b)}
    assert got == ref
    for (i, j), l in zip(adj.nodes, adj.length):
        assert l == pytest.approx(np.linalg.norm(coarse_mesh.nodes[i] - coarse_mesh.nodes[j]))


# -- transfer_field ------------------------------------------------------------------

def test_transfer_constant(fine_mesh, coarse_mesh):
    v = transfer_field(fine_mesh, np.full(fine_mesh.n_triangles, 3.5), coarse_mesh)
    assert np.all(v == 3.5)


def test_transfer_identity(coarse_mesh):
    v = np.random.default_rng(0).random(coarse_mesh.n_triangles)
    assert np.array_equal(transfer_field(coarse_mesh, v, coarse_mesh), v)


def test_transfer_idempotent_and_bounded(fine_mesh, coarse_mesh):
    v = np.random.default_rng(1).random(fine_mesh.n_triangles)
    w = transfer_field(fine_mesh, v, coarse_mesh)
    assert v.min() <= w.min() and w.max() <= v.max()
    assert np.array_equal(transfer_field(coarse_mesh, w, coarse_mesh), w)


def test_transfer_disc_area(fine_mesh, coarse_mesh):
    c, r = np.array([6.0, -3.0]), 7.0
    ind = (np.hypot(*(fine_mesh.centroids - c).T) <= r).astype(float)
    w = transfer_field(fine_mesh, ind, coarse_mesh)
    assert set(np.unique(w)) <= {0.0, 1.0}
    # Monte Carlo area of the transferred indicator against the analytic disc
    rng = np.random.default_rng(0)
    pts = rng.uniform(-25, 25, size=(10**6, 2))
    pts = pts[np.hypot(*pts.T) < 24.9]
    tri, inside = locate_points(coarse_mesh, pts)
    frac_mesh = w[tri[inside]].mean()
    frac_disc = (np.hypot(*(pts[inside] - c).T) <= r).mean()
    domain = coarse_mesh.areas.sum()
    assert abs(frac_mesh - frac_disc) * domain <= 2 * coarse_mesh.areas.max()


def test_transfer_empty_values_rejected(coarse_mesh, fine_mesh):
    with pytest.raises(MeshError):
        transfer_field(fine_mesh, np.zeros(3), coarse_mesh)


# -- locate / refine / boundary interpolation -------------------------------------

def test_locate_outside_gets_nearest(coarse_mesh):
    idx, inside = locate_points(coarse_mesh, np.array([[0.0, 0.0], [40.0, 0.0]]))
    assert inside.tolist() == [True, False]
    assert coarse_mesh.centroids[idx[1], 0] > 20


def test_refine_quadruples_and_stays_on_circle(coarse_mesh):
    r = refine(coarse_mesh, disk_projection(25.0))
    assert r.n_triangles == 4 * coarse_mesh.n_triangles
    assert np.allclose(np.hypot(*r.nodes[r.boundary_nodes].T), 25.0)


def test_boundary_interpolation_reproduces_linear_trace(fine_mesh, coarse_mesh):
    P = boundary_interpolation(fine_mesh, coarse_mesh)
    assert np.allclose(P.sum(axis=1), 1.0)
    xf = fine_mesh.nodes[fine_mesh.boundary_nodes]
    xc = coarse_mesh.nodes[coarse_mesh.boundary_nodes]
    f = 2.0 * xf[:, 0] - xf[:, 1] + 1.0
    # a linear function is reproduced up to the chord-to-circle offset
    assert np.abs(P @ f - (2.0 * xc[:, 0] - xc[:, 1] + 1.0)).max() < 0.1
