"""Largest eigenpair of the inhomogeneous eigenvalue problem ``A x - b = lam x``, ``|x| = 1``.

For symmetric positive semidefinite ``A`` the largest ``lam`` belongs to the
maximizer of the convex quadratic ``x^T A x - 2 b^T x`` over the unit ball.

Two independent routes are provided:

* :func:`power_method`, the fixed-point iteration
  ``y = A x - b; lam = x.y; x = y/|y|``;
* :func:`companion_solve`, which finds all real eigenvalues from the
  linearized quadratic eigenproblem
  ``[[0, I], [b b^T - A A^T, 2A]] [z; w] = lam [z; w]`` and recovers each
  eigenvector as ``x = (A - lam I)^{-1} b`` normalized.

:func:`solve_largest` runs the power method and falls back to the companion
route when it stalls or lands on a non-maximal fixed point.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

COMPANION_MAX_DIM = 64


class InhomEigConvergenceError(RuntimeError):
    def __init__(self, msg, last: "InhomEigSolution"):
        super().__init__(msg)
        self.last = last


@dataclass(frozen=True)
class InhomEigProblem:
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, float))
        b = np.atleast_1d(np.asarray(self.b, float))
        k = A.shape[0]
        if A.shape != (k, k) or b.shape != (k,) or k < 1:
            raise ValueError("A must be k x k and b a k-vector, k >= 1")
        scale = max(np.abs(A).max(), 1e-300)
        if np.abs(A - A.T).max() > 1e-12 * scale:
            raise ValueError("A must be symmetric")
        object.__setattr__(self, "A", 0.5 * (A + A.T))
        object.__setattr__(self, "b", b)

    @property
    def k(self) -> int:
        return len(self.b)

    def residual(self, lam: float, x: np.ndarray) -> float:
        return float(np.linalg.norm(self.A @ x - self.b - lam * x))

    def objective(self, x: np.ndarray) -> float:
        """``x^T A x - 2 b^T x``, maximized over the unit ball by the top eigenvector."""
        return float(x @ self.A @ x - 2.0 * self.b @ x)


@dataclass(frozen=True)
class InhomEigSolution:
    lam: float
    x: np.ndarray
    iterations: int
    residual: float
    method: str = "power"
    flagged: bool = False  # eigenvector recovered on a singular shift


def power_method(p: InhomEigProblem, tol: float = 1e-10, max_iters: int = 10000, x0=None) -> InhomEigSolution:
    """Fixed-point power iteration for the largest eigenpair.

    Stops when ``|lam_{k+1} - lam_k| <= tol (1 + |lam|)`` and the residual is at
    most ``tol`` times the problem scale ``max(1, |A|, |b|)``.
    """
    A, b = p.A, p.b
    nb = np.linalg.norm(b)
    if x0 is not None:
        x = np.asarray(x0, float)
        x = x / np.linalg.norm(x)
    elif nb > 0:
        x = -b / nb
    else:
        x = np.zeros(p.k)
        x[int(np.argmax(np.diag(A)))] = 1.0
    scale = max(1.0, np.linalg.norm(A, 2), nb)
    lam_old = np.inf
    for it in range(1, max_iters + 1):
        y = A @ x - b
        lam = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            # exact fixed point with lam = 0
            return InhomEigSolution(0.0, x, it, 0.0, "power")
        x = y / ny
        lam_new = float(x @ (A @ x - b))
        res = p.residual(lam_new, x)
        if abs(lam - lam_old) <= tol * (1.0 + abs(lam)) and res <= tol * scale:
            return InhomEigSolution(lam_new, x, it, res, "power")
        lam_old = lam
    last = InhomEigSolution(lam_new, x, max_iters, res, "power")
    raise InhomEigConvergenceError(f"power method did not converge in {max_iters} iterations (residual {res:.2e})", last)


def companion_matrix(A, b, form: str = "outer") -> np.ndarray:
    """2k x 2k linearization of ``(A - lam I)^2 z = b b^T z``.

    ``form="outer"`` uses ``b b^T - A A^T`` in the lower-left block.
    ``form="scalar"`` uses ``(b^T b) I - A A^T``, the other reading of the
    printed formula; it is kept only so tests can show it is wrong.
    """
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    k = len(b)
    if form == "outer":
        C = np.outer(b, b)
    elif form == "scalar":
        C = float(b @ b) * np.eye(k)
    else:
        raise ValueError(f"unknown companion form {form!r}")
    return np.block([[np.zeros((k, k)), np.eye(k)], [C - A @ A.T, 2.0 * A]])


def _recover(p: InhomEigProblem, lam: float, evals, Q, beta) -> tuple[float, np.ndarray, bool]:
    """``x = (A - lam I)^{-1} b`` normalized, through the eigenbasis of A.

    When ``lam`` hits an eigenvalue of A (the "hard case", where ``b`` has no
    component along its eigenvectors) the eigenvalue is a double root of the
    quadratic problem, which LAPACK resolves only to about ``sqrt(eps)``.
    ``lam`` is then snapped onto the eigenvalue and the pseudo-inverse part is
    completed to unit norm along the matching eigenvectors.
    """
    scale = max(1.0, np.abs(evals).max())
    nb = max(np.linalg.norm(beta), 1e-300)
    d = evals - lam
    near = (np.abs(d) <= 1e-6 * scale) & (np.abs(beta) <= 1e-8 * nb)
    if near.any():
        lam = float(evals[near][np.argmin(np.abs(d[near]))])
        d = evals - lam
        sing = np.abs(d) <= 1e-12 * scale
        coef = np.zeros_like(beta)
        coef[~sing] = beta[~sing] / d[~sing]
        rest = 1.0 - coef @ coef
        if rest >= 0.0:
            coef[np.nonzero(sing)[0][0]] = np.sqrt(rest)
            x = Q @ coef
            return lam, x / np.linalg.norm(x), True
    sing = np.abs(d) <= 1e-14 * scale
    coef = np.zeros_like(beta)
    coef[~sing] = beta[~sing] / d[~sing]
    x = Q @ coef
    nx = np.linalg.norm(x)
    if nx == 0.0:
        x = Q[:, int(np.argmin(np.abs(d)))]
        nx = 1.0
    return lam, x / nx, bool(sing.any())


def _refine(p: InhomEigProblem, lam: float, evals, beta, iters: int = 50) -> float:
    """Newton on the secular equation ``sum beta_i^2/(evals_i - lam)^2 = 1``."""
    scale = max(1.0, np.abs(evals).max(), np.linalg.norm(beta))
    for _ in range(iters):
        d = evals - lam
        if np.any(np.abs(d) <= 1e-12 * scale):
            return lam
        phi = float(np.sum(beta**2 / d**2)) - 1.0
        dphi = 2.0 * float(np.sum(beta**2 / d**3))
        if dphi == 0.0:
            return lam
        step = phi / dphi
        lam_new = lam - step
        # stay inside the bracket between neighbouring poles
        if np.sign(evals - lam_new).tolist() != np.sign(d).tolist():
            return lam
        lam = lam_new
        if abs(step) <= 1e-15 * scale:
            break
    return lam


def companion_solve(p: InhomEigProblem, form: str = "outer", rtol: float = 1e-8) -> list[InhomEigSolution]:
    """All real eigenpairs, sorted by decreasing eigenvalue.

    Eigenvalues of the companion matrix come from LAPACK (Hessenberg reduction
    and shifted QR).  Each real one is polished by Newton on the secular
    equation, its eigenvector recovered, and the pair kept only if
    ``|A x - b - lam x| <= rtol (1 + |lam|)``.
    """
    k = p.k
    if k > COMPANION_MAX_DIM:
        raise ValueError(f"companion solver limited to k <= {COMPANION_MAX_DIM}")
    M = companion_matrix(p.A, p.b, form)
    mu = np.linalg.eigvals(M)
    scale = max(1.0, np.abs(mu).max())
    real = np.sort(mu[np.abs(mu.imag) <= 1e-6 * scale].real)[::-1]
    evals, Q = np.linalg.eigh(p.A)
    beta = Q.T @ p.b
    found: list[InhomEigSolution] = []
    for lam in real:
        lam = _refine(p, float(lam), evals, beta)
        lam, x, flagged = _recover(p, lam, evals, Q, beta)
        lam = float(x @ (p.A @ x - p.b))
        res = p.residual(lam, x)
        if res > rtol * (1.0 + abs(lam)) or abs(np.linalg.norm(x) - 1.0) > 1e-10:
            continue
        if any(abs(lam - s.lam) <= 1e-12 * scale and np.allclose(x, s.x, atol=1e-8) for s in found):
            continue
        found.append(InhomEigSolution(lam, x, 0, res, "companion", flagged))
    found.sort(key=lambda s: -s.lam)
    return found


def polish(p: InhomEigProblem, sol: InhomEigSolution) -> InhomEigSolution:
    """A few Newton steps on the secular equation from ``sol.lam``.

    The power method stops on a tolerance relative to the problem scale;
    this drives the residual to round-off.  Kept only if it improves it.
    """
    evals, Q = np.linalg.eigh(p.A)
    beta = Q.T @ p.b
    lam = _refine(p, sol.lam, evals, beta)
    lam, x, flagged = _recover(p, lam, evals, Q, beta)
    if np.dot(x, sol.x) < 0.0 and flagged:
        x = -x  # hard case: keep the side the iteration chose
    lam = float(x @ (p.A @ x - p.b))
    res = p.residual(lam, x)
    if res < sol.residual and abs(lam - sol.lam) <= 1e-6 * (1.0 + abs(sol.lam)):
        return InhomEigSolution(lam, x, sol.iterations, res, sol.method, flagged)
    return sol


def solve_largest(p: InhomEigProblem, tol: float = 1e-10, max_iters: int = 10000) -> InhomEigSolution:
    """Largest eigenpair: power method first, companion linearization as fallback.

    The largest eigenvalue is never below ``lam_max(A)``; a power-method
    fixed point under that value (start vector orthogonal to the dominant
    direction) triggers the fallback as well.
    """
    lam_A = float(np.linalg.eigvalsh(p.A)[-1])
    try:
        sol = power_method(p, tol=tol, max_iters=max_iters)
        if sol.lam >= lam_A - 1e-9 * max(1.0, abs(lam_A)):
            return polish(p, sol)
        log.debug("power method fixed point %.6g below lam_max(A) = %.6g", sol.lam, lam_A)
    except InhomEigConvergenceError as exc:
        log.debug("power method stalled: %s", exc)
    sols = companion_solve(p)
    if not sols:
        raise InhomEigConvergenceError("no eigenpair recovered by either solver", None)
    best = sols[0]
    # polish with a few fixed-point steps from the recovered vector
    try:
        pol = power_method(p, tol=tol, max_iters=50, x0=best.x)
        if abs(pol.lam - best.lam) <= 1e-8 * (1.0 + abs(best.lam)) and pol.residual < best.residual:
            return InhomEigSolution(pol.lam, pol.x, pol.iterations, pol.residual, "companion", best.flagged)
    except InhomEigConvergenceError:
        pass
    return best
