import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robust_topo.mesh import (
    FIXED,
    ModelError,
    SingularStiffnessError,
    bar_unit_stiffness,
    build_ground_structure,
    build_sheet_mesh,
    build_truss,
    count_ground_structure_bars,
    quad4_unit_stiffness,
    solve_equilibrium,
)

from .conftest import random_design, random_truss


def test_bar_stiffness_is_axial_spring():
    # volume x, length l: axial stiffness E*(x/l)/l; elongation is the projected relative motion
    p, q = np.array([0.0, 0.0]), np.array([3.0, 4.0])
    K = bar_unit_stiffness(p, q, young=2.0)
    u = np.array([0.1, -0.2, 0.4, 0.3])
    elong = (u[2:] - u[:2]) @ (q - p) / 5.0
    assert u @ K @ u == pytest.approx(2.0 / 25.0 * elong**2)
    # rigid translations and the rotation produce no energy
    for r in ([1, 0, 1, 0], [0, 1, 0, 1], [0, 0, -4, 3]):
        assert np.allclose(K @ np.array(r, float), 0.0)


def test_zero_length_bar_rejected():
    with pytest.raises(ModelError):
        bar_unit_stiffness([1.0, 1.0], [1.0, 1.0])


def test_quad4_rigid_modes_and_spectrum():
    ke = quad4_unit_stiffness(np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float), 1.0, 0.0)
    w = np.sort(np.linalg.eigvalsh(ke))
    assert np.allclose(w[:3], 0.0, atol=1e-12)
    assert np.all(w[3:] > 1e-3)
    assert np.allclose(ke, ke.T)


@pytest.mark.parametrize("nu", [0.0, 0.2, 0.3])
def test_quad4_constant_strain_patch(nu):
    # linear displacement fields are reproduced exactly: energy = area * eps^T D eps
    xy = np.array([[0, 0], [2, 0], [2, 0.5], [0, 0.5]], float)
    ke = quad4_unit_stiffness(xy, 3.0, nu)
    exx, eyy, gxy = 1e-3, -2e-3, 5e-4
    u = np.concatenate([[exx * x + gxy * y, eyy * y] for x, y in xy])
    f = 3.0 / ((1 + nu) * (1 - 2 * nu))
    D = f * np.array([[1 - nu, nu, 0], [nu, 1 - nu, 0], [0, 0, 0.5 - nu]])
    eps = np.array([exx, eyy, gxy])
    assert u @ ke @ u == pytest.approx(1.0 * eps @ D @ eps, rel=1e-12)


def test_zero_poisson_coupling_is_pure_shear():
    # with nu = 0 the normal strains decouple; the u-v block is the shear term E/2 * int N_i,y N_j,x
    hx, hy = 0.1, 0.1
    ke = quad4_unit_stiffness(np.array([[0, 0], [hx, 0], [hx, hy], [0, hy]], float), 1.0, 0.0)
    g = 1 / np.sqrt(3)
    shear = np.zeros((4, 4))
    corners = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    for xi in (-g, g):
        for eta in (-g, g):
            dx = np.array([a * (1 + b * eta) / 4 for a, b in corners]) * 2 / hx
            dy = np.array([b * (1 + a * xi) / 4 for a, b in corners]) * 2 / hy
            shear += 0.5 * np.outer(dy, dx) * hx * hy / 4
    coupling = ke[0::2, 1::2]
    assert np.allclose(coupling, shear, atol=1e-14)
    assert np.abs(coupling).max() > 0.1  # the block does not vanish


def test_clockwise_quad_rejected():
    with pytest.raises(ModelError):
        quad4_unit_stiffness(np.array([[0, 0], [0, 1], [1, 1], [1, 0]], float))


@pytest.mark.parametrize(
    "nx, ny, overlaps, expected",
    [(11, 5, False, 1485), (5, 5, False, 300), (5, 5, True, 200), (2, 3, False, 15)],
)
def test_ground_structure_bar_counts(nx, ny, overlaps, expected):
    assert count_ground_structure_bars(nx, ny, overlaps) == expected
    m = build_ground_structure(nx, ny, 1.0, lambda i, j, x, y: i == 0, remove_overlaps=overlaps)
    assert m.m == expected
    assert m.n == 2 * (nx - 1) * ny


def test_ground_structure_node_numbering():
    m = build_ground_structure(3, 4, 2.0, {(0, 0), (0, 3)}, spacing_y=0.5)
    assert np.allclose(m.coords[2 * 4 + 1], [4.0, 0.5])
    assert np.all(m.dof_map[0] == FIXED) and np.all(m.dof_map[3] == FIXED)


def test_insufficient_supports():
    with pytest.raises(ModelError, match="insufficient supports"):
        build_ground_structure(3, 3, 1.0, ())


def test_unsupported_mechanism_rejected():
    # one free node held by a single bar cannot resist transverse loads
    with pytest.raises(ModelError, match="not adequately supported"):
        build_truss([(0, 0), (1, 0)], [(0, 1)], [(True, True), (False, False)])
    m = build_truss([(0, 0), (1, 0)], [(0, 1)], [(True, True), (False, False)], check_support=False)
    assert m.n == 2


def test_sheet_mesh_layout():
    m = build_sheet_mesh(20, 10, 2.0, 1.0, 0.0)
    assert (m.m, m.n, m.n_nodes) == (200, 2 * 20 * 11, 21 * 11)
    assert np.allclose(m.coords[20 * 11 + 5], [2.0, 0.5])
    assert np.all(m.dof_map[:11] == FIXED)


def test_sheet_mesh_bad_input():
    with pytest.raises(ModelError):
        build_sheet_mesh(2, 2, 1.0, 1.0, 0.5)
    with pytest.raises(ModelError):
        build_sheet_mesh(2, 2, 0.0, 1.0)
    with pytest.raises(ModelError):
        build_sheet_mesh(2, 2, 1.0, 1.0, fixed_edge="middle")


def test_sheet_extra_node_supports():
    m = build_sheet_mesh(2, 2, 1.0, 1.0, fixed_edge="left", fixed_nodes={(2, 0)})
    assert np.all(m.dof_map[2 * 3 + 0] == FIXED)


def test_singular_design_detected(toy_truss):
    with pytest.raises(SingularStiffnessError, match="singular stiffness"):
        toy_truss.factorize(np.zeros(3))
    # the middle bar alone leaves the vertical direction without stiffness
    with pytest.raises(SingularStiffnessError):
        toy_truss.factorize(np.array([0.0, 1.0, 0.0]))


def test_statically_determinate_displacements(toy_truss):
    # two diagonals at 45 degrees: each carries F/sqrt(2) in the symmetric load case
    x = np.array([1.0, 0.0, 1.0])
    u, c = solve_equilibrium(toy_truss, x, np.array([1.0, 0.0]))
    # K_xx = 2 * (E x / l^2) * cos^2 = 2 * (1/2) * (1/2) = 1/2
    assert np.allclose(u, [2.0, 0.0], atol=1e-12)
    assert c == pytest.approx(2.0)


def test_assemble_shape_check(toy_truss):
    with pytest.raises(ValueError):
        toy_truss.assemble(np.ones(4))


@given(seed=st.integers(0, 2**31 - 1), a=st.floats(0.1, 3.0), b=st.floats(0.1, 3.0))
def test_assembly_is_linear_symmetric_psd(seed, a, b):
    rng = np.random.default_rng(seed)
    m = random_truss(rng)
    x, y = random_design(rng, m.m), random_design(rng, m.m)
    K = m.assemble(a * x + b * y).toarray()
    assert np.allclose(K, a * m.assemble(x).toarray() + b * m.assemble(y).toarray())
    assert np.allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() > 0


@given(seed=st.integers(0, 2**31 - 1))
def test_element_energies_sum_to_compliance(seed):
    rng = np.random.default_rng(seed)
    m = random_truss(rng)
    x = random_design(rng, m.m)
    f = rng.standard_normal(m.n)
    u, c = solve_equilibrium(m, x, f)
    assert x @ m.element_energies(u) == pytest.approx(c, rel=1e-10)
    assert np.allclose(m.factorize(x).K @ u, f)
