import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dotrecon.mesh import Mesh, edge_adjacency
from dotrecon.phantom import D_BACKGROUND, MU_BACKGROUND, ParameterField, free_parameter_index, pinned_mask
from dotrecon.regularizers import (
    RegularizerError,
    RegularizerSpec,
    dot_reg,
    graph_laplacian,
    lp_reg,
    make_dot_regularizer,
    make_inner,
    mixed_reg,
    regularizer_from_dict,
    tv_reg,
)
from oracles import quadratic_form_oracle

finite = st.floats(-10, 10, allow_nan=False)


def chain_mesh():
    """Three triangles in a row: 0-1 share an edge of length sqrt(2), 1-2 one of length 1."""
    nodes = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [2, 0]], dtype=float)
    return Mesh(nodes, np.array([[0, 1, 2], [1, 3, 2], [1, 4, 3]]))


# -- lp ------------------------------------------------------------------------

def test_lp_examples():
    assert lp_reg([3.0, 4.0], [3.0, 4.0]) == 0.0
    assert lp_reg([2.0, 0.0], [1.0, 1.0], [1.0, 1.0], 1.0) == 2.0
    y, yb = np.array([1.0, -2.0, 5.0]), np.array([0.5, 0.5, 0.5])
    assert lp_reg(y, yb, p=2.0) == pytest.approx(np.sum((y - yb) ** 2))


def test_lp_zero_weight_ignores_entry():
    assert lp_reg([7.0, 1.0], [0.0, 1.0], [0.0, 1.0]) == 0.0


@pytest.mark.parametrize("kw", [dict(p=0.0), dict(p=2.5), dict(c=[-1.0, 1.0])])
def test_lp_errors(kw):
    with pytest.raises(RegularizerError):
        lp_reg([1.0, 2.0], [0.0, 0.0], **kw)


def test_lp_length_mismatch():
    with pytest.raises(RegularizerError):
        lp_reg([1.0, 2.0], [0.0, 0.0, 0.0])


@settings(max_examples=50)
@given(arrays(float, 6, elements=finite), arrays(float, 6, elements=finite),
       arrays(float, 6, elements=finite), st.sampled_from([1.0, 2.0]))
def test_lp_triangle_inequality(x, y, z, p):
    d = lambda a, b: lp_reg(a, b, p=p) ** (1 / p)
    assert d(x, z) <= d(x, y) + d(y, z) + 1e-9


# -- tv ------------------------------------------------------------------------

def test_tv_examples(two_triangles, coarse_mesh):
    adj = edge_adjacency(two_triangles)
    assert tv_reg([0.0, 1.0], adj) == pytest.approx(np.sqrt(2))
    assert tv_reg(np.full(coarse_mesh.n_triangles, 3.0), edge_adjacency(coarse_mesh)) == 0.0


def test_tv_index_out_of_range(two_triangles):
    with pytest.raises(RegularizerError):
        tv_reg([1.0], edge_adjacency(two_triangles))


_ADJ = None


def coarse_adj():
    global _ADJ
    if _ADJ is None:
        from dotrecon.mesh import generate_disk_mesh
        m = generate_disk_mesh(25.0, 200, seed=0)
        _ADJ = (m, edge_adjacency(m))
    return _ADJ


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16), finite)
def test_tv_shift_invariance_and_triangle_inequality(seed, c):
    m, adj = coarse_adj()
    rng = np.random.default_rng(seed)
    y, z = rng.standard_normal((2, m.n_triangles))
    assert tv_reg(y + c, adj) == pytest.approx(tv_reg(y, adj), rel=1e-9, abs=1e-9)
    assert tv_reg(y + z, adj) <= tv_reg(y, adj) + tv_reg(z, adj) + 1e-9
    assert tv_reg(y, adj) >= 0


# -- mixed ---------------------------------------------------------------------

def test_mixed_at_background_is_zero(two_triangles):
    assert mixed_reg([1.0, 1.0], 1.0, None, 1.0, edge_adjacency(two_triangles), 0.7, 0.3) == 0.0


def test_mixed_linear_in_weights(coarse_mesh):
    adj = edge_adjacency(coarse_mesh)
    y = np.random.default_rng(0).random(coarse_mesh.n_triangles)
    a = mixed_reg(y, 0.5, None, 1.0, adj, 0.3, 1.7)
    assert mixed_reg(y, 0.5, None, 1.0, adj, 0.6, 3.4) == pytest.approx(2 * a)


def test_mixed_hand_value_on_chain():
    adj = edge_adjacency(chain_mesh())
    # lp: |0| + |2| + |1| = 3; tv: sqrt(2)*|1-3| + 1*|3-2| = 2 sqrt(2) + 1
    v = mixed_reg([1.0, 3.0, 2.0], 1.0, None, 1.0, adj, 2.0, 0.5)
    assert v == pytest.approx(2.0 * 3.0 + 0.5 * (2 * np.sqrt(2) + 1))
    with pytest.raises(RegularizerError):
        mixed_reg([1.0, 3.0, 2.0], 1.0, None, 1.0, adj, 0.0, 1.0)


# -- dot-combined ------------------------------------------------------------------

def test_dot_zero_at_background(two_triangles):
    adj = edge_adjacency(two_triangles)
    mus_b = 1.0 / (3.0 * D_BACKGROUND) - MU_BACKGROUND  # bit-exact background scattering
    for inner in ("lp", "tv"):
        spec = RegularizerSpec(kind="dot-combined", inner=inner, mus_background=mus_b)
        q = ParameterField(two_triangles, D_BACKGROUND, MU_BACKGROUND)
        assert dot_reg(q, spec, make_inner(spec, adj)) == 0.0
        # with the nominal 2.0 the value is only rounding noise
        nominal = RegularizerSpec(kind="dot-combined", inner=inner)
        assert dot_reg(q, nominal, make_inner(nominal, adj)) == pytest.approx(0.0, abs=1e-12)


def test_dot_hand_value_two_triangles(two_triangles):
    adj = edge_adjacency(two_triangles)
    D = np.full(2, D_BACKGROUND)
    mu = np.array([2 * MU_BACKGROUND, MU_BACKGROUND])
    # mu/mu_b = (2, 1); mus = 2.025 - mu = (1.975, 2.0), so mus/mus_b = (0.9875, 1)
    lp = RegularizerSpec(kind="dot-combined", inner="lp")
    assert make_dot_regularizer(lp, adj)(D, mu) == pytest.approx(0.5 * 1.0 + 0.5 * 0.0125)
    tv = RegularizerSpec(kind="dot-combined", inner="tv")
    assert make_dot_regularizer(tv, adj)(D, mu) == pytest.approx(np.sqrt(2) * 0.5 * 1.0125)


def test_dot_monotone_in_anomaly(coarse_mesh):
    adj = edge_adjacency(coarse_mesh)
    spec = RegularizerSpec(kind="dot-combined", inner="lp")
    R = make_dot_regularizer(spec, adj)
    bump = np.random.default_rng(1).random(coarse_mesh.n_triangles) * MU_BACKGROUND
    D = np.full(coarse_mesh.n_triangles, D_BACKGROUND)
    vals = [R(D, MU_BACKGROUND + t * bump) for t in (0.5, 1.0, 2.0, 4.0)]
    assert np.all(np.diff(vals) > 0)


def test_dot_rejects_nonpositive_D(two_triangles):
    spec = RegularizerSpec(kind="dot-combined")
    with pytest.raises(RegularizerError):
        make_dot_regularizer(spec, edge_adjacency(two_triangles))([0.0, 0.1], [0.02, 0.02])


@pytest.mark.parametrize("kw", [dict(kind="l3"), dict(inner="dot-combined"), dict(p=3.0),
                                dict(beta1=0.7, beta2=0.7), dict(beta1=1.0, beta2=0.0),
                                dict(alpha1=0.0), dict(mu_background=0.0)])
def test_spec_validation(kw):
    with pytest.raises(RegularizerError):
        RegularizerSpec(**kw)


def test_spec_from_dict():
    s = regularizer_from_dict({"kind": "mixed", "p": 1.5, "weights": [1, 2]})
    assert s.kind == "mixed" and s.weights == (1, 2) and s.beta1 == 0.5


# -- graph Laplacian ---------------------------------------------------------------

def test_laplacian_single_free_triangle(two_triangles):
    L = graph_laplacian(two_triangles, edge_adjacency(two_triangles), [0]).toarray()
    assert np.allclose(L, np.sqrt(2) * np.eye(2))


def test_laplacian_two_free_triangles(two_triangles):
    L = graph_laplacian(two_triangles, edge_adjacency(two_triangles), [0, 1]).toarray()
    block = np.sqrt(2) * np.array([[1.0, -1.0], [-1.0, 1.0]])
    assert np.allclose(L[:2, :2], block) and np.allclose(L[2:, 2:], block)
    assert not np.any(L[:2, 2:])


def test_laplacian_without_pinning_has_zero_row_sums(coarse_mesh):
    adj = edge_adjacency(coarse_mesh)
    L = graph_laplacian(coarse_mesh, adj, np.arange(coarse_mesh.n_triangles))
    assert np.abs(L.sum(axis=1)).max() < 1e-12
    assert abs(L - L.T).max() == 0


def test_laplacian_quadratic_form_and_sparsity(coarse_mesh):
    adj = edge_adjacency(coarse_mesh)
    f = ParameterField(coarse_mesh, D_BACKGROUND, MU_BACKGROUND, pinned=pinned_mask(coarse_mesh))
    free = free_parameter_index(f)
    L = graph_laplacian(coarse_mesh, adj, free)
    n = len(free)
    pos = {int(t): i for i, t in enumerate(free)}
    pairs, anchors = [], []
    for a, b, l in zip(adj.tri_a, adj.tri_b, adj.length):
        if a in pos and b in pos:
            pairs.append((pos[a], pos[b], l))
        elif a in pos:
            anchors.append((pos[a], l))
        elif b in pos:
            anchors.append((pos[b], l))
    rng = np.random.default_rng(2)
    for _ in range(5):
        v = rng.standard_normal(2 * n)
        expect = quadratic_form_oracle(v[:n], pairs, anchors) + quadratic_form_oracle(v[n:], pairs, anchors)
        assert v @ (L @ v) == pytest.approx(expect, rel=1e-12)
    # off-diagonal entries only between adjacent free triangles
    adjacent = {(a, b) for a, b, _ in pairs} | {(b, a) for a, b, _ in pairs}
    C = L[:n, :n].tocoo()
    assert all((i, j) in adjacent for i, j in zip(C.row, C.col) if i != j)


def test_laplacian_positive_definite_when_anchored(coarse_mesh):
    f = ParameterField(coarse_mesh, D_BACKGROUND, MU_BACKGROUND, pinned=pinned_mask(coarse_mesh))
    L = graph_laplacian(coarse_mesh, edge_adjacency(coarse_mesh), free_parameter_index(f))
    rng = np.random.default_rng(3)
    V = rng.standard_normal((L.shape[0], 100))
    ritz = np.einsum("ij,ij->j", V, L @ V) / np.einsum("ij,ij->j", V, V)
    assert ritz.min() > 0
    assert np.linalg.eigvalsh(L.toarray()).min() > 0
