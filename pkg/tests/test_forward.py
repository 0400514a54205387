import numpy as np
import pytest

from dotrecon.forward import (
    DEFAULT_K,
    FLATTENING,
    ForwardError,
    MeasurementSet,
    SourceBank,
    assemble,
    forward_map,
    load_vector,
    measure,
    solve_forward,
    trig_sources,
    wavenumber,
)
from dotrecon.mesh import Mesh, disk_projection, generate_disk_mesh, refine
from dotrecon.phantom import D_BACKGROUND, MU_BACKGROUND
from oracles import FROZEN, bessel_amplitude
from conftest import random_field

R = 25.0


def reference_triangle():
    return Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))


def boundary_theta(mesh):
    x, y = mesh.nodes[mesh.boundary_nodes].T
    return np.arctan2(y, x)


def test_default_wavenumber():
    assert DEFAULT_K == pytest.approx(2 * np.pi * 100e6 * 1e-12 / 0.214)
    assert DEFAULT_K == pytest.approx(2.936e-3, rel=1e-3)
    assert wavenumber(0.0) == 0.0


# -- assemble --------------------------------------------------------------------

def test_reference_element_stiffness():
    A = assemble(reference_triangle(), 1.0, k=0.0, mu=0.0).matrix.toarray()
    assert np.allclose(A, FROZEN["reference_stiffness"], atol=1e-15)


def test_reference_element_mass():
    A = assemble(reference_triangle(), 1e-300, k=0.0, mu=1.0).matrix.toarray()
    assert np.allclose(A, FROZEN["reference_mass"], atol=1e-15)


def test_zero_row_sums_without_absorption(coarse_mesh):
    A = assemble(coarse_mesh, np.random.default_rng(0).random(coarse_mesh.n_triangles) + 0.1,
                 k=0.0, mu=0.0).matrix
    assert np.abs(A.sum(axis=1)).max() < 1e-12


def test_imaginary_part_is_k_times_mass(coarse_mesh):
    k = 0.37
    A = assemble(coarse_mesh, D_BACKGROUND, k=k, mu=MU_BACKGROUND).matrix
    M = assemble(coarse_mesh, 1e-300, k=0.0, mu=1.0).matrix
    assert abs(A.imag - k * M.real).max() < 1e-14


def test_matrix_symmetric_and_positive_real_form(coarse_mesh):
    rng = np.random.default_rng(1)
    A = assemble(coarse_mesh, random_field(coarse_mesh, rng, pin=False)).matrix
    assert abs(A - A.T).max() == 0
    assert A.shape == (coarse_mesh.n_nodes,) * 2
    for _ in range(5):
        v = rng.standard_normal(coarse_mesh.n_nodes)
        assert (v @ (A.real @ v)) > 0


@pytest.mark.parametrize("D, mu, k", [(0.0, 0.02, 0.0), (-1.0, 0.02, 0.0), (0.1, -0.01, 0.0),
                                      (0.1, 0.02, -1.0), (np.nan, 0.02, 0.0)])
def test_assemble_rejects_bad_coefficients(coarse_mesh, D, mu, k):
    with pytest.raises(ForwardError):
        assemble(coarse_mesh, D, k=k, mu=mu)


# -- solve ---------------------------------------------------------------------------

def test_zero_source_gives_zero_field(coarse_mesh):
    s = assemble(coarse_mesh, D_BACKGROUND, mu=MU_BACKGROUND)
    u = solve_forward(s, np.zeros(len(coarse_mesh.boundary_nodes)))
    assert not np.any(u)


def test_singular_system_rejected(coarse_mesh):
    s = assemble(coarse_mesh, D_BACKGROUND, k=0.0, mu=0.0)
    with pytest.raises(ForwardError, match="singular"):
        solve_forward(s, np.ones(len(coarse_mesh.boundary_nodes)))


def test_solve_residual(coarse_mesh):
    s = assemble(coarse_mesh, random_field(coarse_mesh, np.random.default_rng(2), pin=False))
    f = trig_sources(coarse_mesh).values[3]
    b = load_vector(coarse_mesh, f)
    u = solve_forward(s, f)
    assert np.linalg.norm(s.matrix @ u - b) <= 1e-10 * np.linalg.norm(b)


def test_reciprocity(coarse_mesh):
    s = assemble(coarse_mesh, random_field(coarse_mesh, np.random.default_rng(3), pin=False))
    bank = trig_sources(coarse_mesh)
    u1, u2 = (solve_forward(s, bank.values[i]) for i in (2, 7))
    b1, b2 = (load_vector(coarse_mesh, bank.values[i]) for i in (2, 7))
    lhs, rhs = b2 @ u1, b1 @ u2
    assert abs(lhs - rhs) <= 1e-8 * abs(lhs)


def test_load_vector_integrates_constant(coarse_mesh):
    b = load_vector(coarse_mesh, np.ones(len(coarse_mesh.boundary_nodes)))
    e = coarse_mesh.boundary_edges
    perimeter = np.linalg.norm(coarse_mesh.nodes[e[:, 0]] - coarse_mesh.nodes[e[:, 1]], axis=1).sum()
    assert b.sum() == pytest.approx(perimeter)
    with pytest.raises(ForwardError):
        load_vector(coarse_mesh, np.ones(3))


# -- Bessel oracle ---------------------------------------------------------------------

def test_oracle_values_frozen():
    D, mu = 1 / (3 * 2.025), 0.025
    assert bessel_amplitude(R, D, mu, 0.0, 1) == pytest.approx(FROZEN["bessel_amp_k0_n1"], rel=1e-12)
    assert bessel_amplitude(R, D, mu, 0.0, 2) == pytest.approx(FROZEN["bessel_amp_k0_n2"], rel=1e-12)
    assert bessel_amplitude(R, D, mu, DEFAULT_K, 1) == pytest.approx(FROZEN["bessel_amp_k_n1"], rel=1e-12)


def bessel_error(mesh, n, k):
    theta = boundary_theta(mesh)
    s = assemble(mesh, D_BACKGROUND, k=k, mu=MU_BACKGROUND)
    g = measure(solve_forward(s, np.cos(n * theta)), mesh)
    ref = bessel_amplitude(R, D_BACKGROUND, MU_BACKGROUND, k, n) * np.cos(n * theta)
    return np.linalg.norm(g - ref) / np.linalg.norm(ref)


@pytest.mark.parametrize("n, k", [(1, 0.0), (2, 0.0), (1, DEFAULT_K)])
def test_bessel_trace(fine_mesh, n, k):
    assert bessel_error(fine_mesh, n, k) < 0.02


def test_bessel_mesh_convergence():
    m = generate_disk_mesh(R, 541, seed=0)
    e0 = bessel_error(m, 2, DEFAULT_K)
    e1 = bessel_error(refine(m, disk_projection(R)), 2, DEFAULT_K)
    assert e0 / e1 >= 3.0


def test_forward_map_matches_bessel_per_source(fine_mesh):
    bank = trig_sources(fine_mesh, center=(0.0, 0.0))
    ms = forward_map(fine_mesh, (D_BACKGROUND, MU_BACKGROUND), DEFAULT_K, bank,
                     system=assemble(fine_mesh, D_BACKGROUND, mu=MU_BACKGROUND))
    theta = boundary_theta(fine_mesh)
    for j in range(16):
        n = (j + 2) // 2
        phase = np.cos(n * theta) if j % 2 == 0 else np.sin(n * theta)
        ref = bessel_amplitude(R, D_BACKGROUND, MU_BACKGROUND, DEFAULT_K, n) * phase
        assert np.linalg.norm(ms.traces[j] - ref) < 0.05 * np.linalg.norm(ref)


# -- measure / forward_map ---------------------------------------------------------

def test_measure_constant_and_ordering(coarse_mesh):
    u = np.full(coarse_mesh.n_nodes, 2.5 + 1j)
    t = measure(u, coarse_mesh)
    assert len(t) == len(coarse_mesh.boundary_nodes) and np.all(t == 2.5 + 1j)
    v = np.arange(coarse_mesh.n_nodes, dtype=float)
    assert np.array_equal(measure(v, coarse_mesh), measure(v, coarse_mesh))
    with pytest.raises(ForwardError):
        measure(np.ones(3), coarse_mesh)


def test_forward_map_zero_source(coarse_mesh):
    bank = SourceBank(np.zeros((1, len(coarse_mesh.boundary_nodes))))
    ms = forward_map(coarse_mesh, random_field(coarse_mesh, np.random.default_rng(0)), DEFAULT_K, bank)
    assert not np.any(ms.vector)


def test_forward_map_linear_in_source_and_deterministic(coarse_mesh):
    q = random_field(coarse_mesh, np.random.default_rng(4))
    bank = trig_sources(coarse_mesh)
    a = forward_map(coarse_mesh, q, DEFAULT_K, bank).vector
    b = forward_map(coarse_mesh, q, DEFAULT_K, bank.scaled(2.0)).vector
    assert np.allclose(b, 2 * a, rtol=1e-12, atol=0)
    assert np.array_equal(a, forward_map(coarse_mesh, q, DEFAULT_K, bank).vector)


def test_flattening_order(coarse_mesh):
    q = random_field(coarse_mesh, np.random.default_rng(5))
    ms = forward_map(coarse_mesh, q, DEFAULT_K, trig_sources(coarse_mesh, 4))
    Nb = len(coarse_mesh.boundary_nodes)
    v = ms.vector
    assert len(v) == 2 * 4 * Nb == len(ms)
    assert v[2 * (1 * Nb + 3)] == ms.traces[1, 3].real
    assert v[2 * (1 * Nb + 3) + 1] == ms.traces[1, 3].imag
    assert np.array_equal(MeasurementSet.unflatten(v, 4), ms.traces)
    assert "source-major" in FLATTENING


def test_absorption_monotonicity(coarse_mesh):
    bank = SourceBank(np.ones((1, len(coarse_mesh.boundary_nodes))))
    energy = []
    for mu in (0.01, 0.02, 0.04, 0.08):
        ms = forward_map(coarse_mesh, None, DEFAULT_K, bank,
                         system=assemble(coarse_mesh, D_BACKGROUND, mu=mu))
        energy.append(np.sum(np.abs(ms.vector) ** 2))
    assert np.all(np.diff(energy) < 0)


def test_measurement_csv_round_trip(tmp_path, coarse_mesh):
    q = random_field(coarse_mesh, np.random.default_rng(6))
    ms = forward_map(coarse_mesh, q, DEFAULT_K, trig_sources(coarse_mesh, 3))
    ms = ms.with_vector(ms.vector, sigma=np.full(len(ms), 0.1), noise={"level": 0.01})
    ms.to_csv(tmp_path / "g.csv", coarse_mesh.boundary_nodes)
    back = MeasurementSet.from_csv(tmp_path / "g.csv")
    assert np.array_equal(back.vector, ms.vector)
    assert np.array_equal(back.sigma, ms.sigma)
    assert back.k == ms.k and back.noise == {"level": 0.01}
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "source,node,re,im"
