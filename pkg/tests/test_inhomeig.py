import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robust_topo.inhomeig import (
    InhomEigConvergenceError,
    InhomEigProblem,
    companion_matrix,
    companion_solve,
    power_method,
    solve_largest,
)


def random_problem(rng, k):
    B = rng.standard_normal((k, k))
    A = B @ B.T * rng.uniform(0.1, 3)
    b = rng.standard_normal(k) * rng.uniform(0.1, 3)
    return InhomEigProblem(A, b)


def sampled_max(p, rng, n=200_000):
    g = rng.standard_normal((n, p.k))
    g /= np.linalg.norm(g, axis=1)[:, None]
    return float(np.max(np.einsum("ij,jk,ik->i", g, p.A, g) - 2 * g @ p.b))


def test_identity_matrix_closed_form():
    # A = I: x = -b/|b| and lam = 1 + |b|
    b = -np.array([0.6, 0.8]) * 2.5
    sol = power_method(InhomEigProblem(np.eye(2), b))
    assert sol.lam == pytest.approx(1 + 2.5, abs=1e-10)
    assert np.allclose(sol.x, [0.6, 0.8])


def test_zero_b_reduces_to_symmetric_eigenproblem():
    sol = solve_largest(InhomEigProblem(np.diag([3.0, 1.0]), np.zeros(2)))
    assert sol.lam == pytest.approx(3.0)
    assert abs(sol.x[0]) == pytest.approx(1.0)


def test_hard_case_b_orthogonal_to_top_eigenvector():
    # the power iteration started at -b/|b| never leaves the first axis; the fallback must
    p = InhomEigProblem(np.diag([1e-6, 5e5]), np.array([-1e-4, 0.0]))
    assert power_method(p).lam < 1.0
    sol = solve_largest(p)
    assert sol.lam == pytest.approx(5e5, rel=1e-12)
    assert abs(sol.x[1]) == pytest.approx(1.0)
    assert p.residual(sol.lam, sol.x) <= 1e-8


def test_companion_scalar_form_is_wrong():
    rng = np.random.default_rng(4)
    p = random_problem(rng, 4)
    ref = solve_largest(p).lam
    outer = companion_solve(p, form="outer")[0].lam
    assert outer == pytest.approx(ref, rel=1e-8)
    mu = np.linalg.eigvals(companion_matrix(p.A, p.b, form="scalar"))
    real = mu[np.abs(mu.imag) < 1e-8].real
    assert real.size == 0 or np.min(np.abs(real - ref)) > 1e-3 * abs(ref)


def test_companion_limit():
    with pytest.raises(ValueError):
        companion_solve(InhomEigProblem(np.eye(65), np.ones(65)))
    with pytest.raises(ValueError):
        companion_matrix(np.eye(2), np.ones(2), form="other")


def test_power_method_iteration_limit_reports_last_iterate():
    rng = np.random.default_rng(0)
    p = random_problem(rng, 6)
    with pytest.raises(InhomEigConvergenceError) as info:
        power_method(p, tol=1e-15, max_iters=2)
    assert info.value.last.iterations == 2


def test_problem_validation():
    with pytest.raises(ValueError, match="symmetric"):
        InhomEigProblem(np.array([[1.0, 2.0], [0.0, 1.0]]), np.ones(2))
    with pytest.raises(ValueError):
        InhomEigProblem(np.eye(2), np.ones(3))


@given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 8))
def test_power_and_companion_agree(seed, k):
    rng = np.random.default_rng(seed)
    p = random_problem(rng, k)
    pm = power_method(p)
    comp = companion_solve(p)[0]
    assert pm.lam == pytest.approx(comp.lam, rel=1e-8, abs=1e-10)
    assert p.residual(comp.lam, comp.x) <= 1e-8 * (1 + abs(comp.lam))
    assert np.linalg.norm(pm.x) == pytest.approx(1.0)


@given(seed=st.integers(0, 2**31 - 1), k=st.integers(1, 5))
def test_largest_eigenpair_maximizes_quadratic(seed, k):
    rng = np.random.default_rng(seed)
    p = random_problem(rng, k)
    sol = solve_largest(p)
    # the maximizer of x^T A x - 2 b^T x over the unit ball is the top eigenvector
    assert p.objective(sol.x) >= sampled_max(p, rng) - 1e-9
    assert sol.lam >= np.linalg.eigvalsh(p.A)[-1] - 1e-9
    # every other real eigenvalue is smaller
    assert all(s.lam <= sol.lam + 1e-8 * (1 + abs(sol.lam)) for s in companion_solve(p))


def test_power_method_iterations_on_example_blocks():
    # blocks of the worst-case problem for the final designs of the shipped examples
    from robust_topo import io as rio
    from robust_topo.robust import robustify
    from robust_topo.uncertainty import LoadCase, block_eigenproblem, reduced_compliance_matrix

    for name in rio.EXAMPLES:
        problem, config = rio.parse_problem(rio.example_path(name))
        x = robustify(problem, config).final_design
        x = np.maximum(x, problem.feasible.solver_floor(problem.model.m))
        for f in problem.loads:
            case = LoadCase.from_spec(f, problem.model, config.ellipsoid)
            S = reduced_compliance_matrix(problem.model, x, case.I)
            sol = power_method(block_eigenproblem(S, case.P_tilde, case.f_tilde), tol=1e-10)
            assert sol.iterations <= 16
