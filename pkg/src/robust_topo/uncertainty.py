"""Ellipsoidal load uncertainty and worst-case load analysis.

A load case is perturbed as ``f = f0 + P g`` with ``|g| <= 1``, where ``P`` is
supported on the DOFs of the loaded nodes only.  For a fixed design the
worst perturbation is found on that small block: with
``S = (K^{-1})_{II}`` the problem reduces to maximizing
``(f~ + P~ g~)^T S (f~ + P~ g~)`` over the unit ball, i.e. the largest
eigenpair of ``P~^T S P~ g~ + P~^T S f~ = lam g~``.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .design import MultiLoadProblem, compliances
from .inhomeig import InhomEigProblem, InhomEigSolution, solve_largest
from .mesh import FIXED, Factorization, SingularStiffnessError, StructuralModel

log = logging.getLogger(__name__)

INF_RATIO = 1e12
ROBUST_TOL = 1.05
THREADS_ENV = "ROBUST_TOPO_THREADS"


def default_workers() -> int:
    """Worker threads for per-case evaluations, capped by ``$ROBUST_TOPO_THREADS``."""
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        log.warning("ignoring non-integer %s", THREADS_ENV)
        return 1


@dataclass(frozen=True)
class EllipsoidSpec:
    """Shape of the uncertainty set around each loaded node's force.

    ``ball``: ``P~ = tau I``.  ``flat``: semi-axis ``tau`` along the nominal
    force and ``major`` across it.  With ``relative`` both semi-axes are
    multiplied by ``|f0|``, the norm of the whole nominal load vector
    (``norm="load"``) or of the node's own force (``norm="node"``).
    ``tau = 0`` (ball) gives the degenerate set ``{f0}``.
    """

    kind: str = "flat"
    tau: float = 1e-3
    major: float = 3.0
    relative: bool = False
    norm: str = "load"

    def __post_init__(self):
        if self.kind not in ("ball", "flat"):
            raise ValueError(f"unknown ellipsoid kind {self.kind!r}")
        if self.norm not in ("load", "node"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.kind == "ball":
            if self.tau < 0:
                raise ValueError("ball radius must be >= 0")
        else:
            if not (self.tau > 0 and self.major > 0):
                raise ValueError("flat ellipsoid needs tau > 0 and major > 0")
            if self.major < self.tau:
                raise ValueError("flat ellipsoid needs major >= tau")

    def node_block(self, force: np.ndarray, load_norm: float) -> np.ndarray:
        """2x2 perturbation block for a node carrying nominal ``force``."""
        a, b = force
        if self.kind == "ball":
            s = self.tau * (self._scale(force, load_norm))
            return s * np.eye(2)
        if a == 0.0 and b == 0.0:
            raise AssertionError("loaded node without nominal force")
        scale = self._scale(force, load_norm)
        phi = np.arctan2(b, a)
        T = np.array([[np.cos(phi), np.sin(phi)], [-np.sin(phi), np.cos(phi)]])
        return T.T @ np.diag([self.tau * scale, self.major * scale]) @ T

    def _scale(self, force, load_norm) -> float:
        if not self.relative:
            return 1.0
        return float(np.linalg.norm(force)) if self.norm == "node" else load_norm


def index_sets(f0, model: StructuralModel) -> tuple[np.ndarray, np.ndarray]:
    """Free DOFs of every node with a nonzero nominal component, and the rest."""
    f0 = np.asarray(f0, float)
    if f0.shape != (model.n,):
        raise ValueError(f"load has shape {f0.shape}, expected ({model.n},)")
    if not np.any(f0):
        raise ValueError("empty load")
    owner = model.dof_node()
    nodes = np.unique(owner[f0 != 0.0])
    dofs = model.dof_map[nodes].ravel()
    I = np.sort(dofs[dofs != FIXED])
    J = np.setdiff1d(np.arange(model.n), I)
    return I, J


def build_perturbation(f0, I, spec: EllipsoidSpec, model: StructuralModel) -> np.ndarray:
    """Block-diagonal ``P~`` on the loaded DOFs ``I``, one block per loaded node."""
    f0 = np.asarray(f0, float)
    I = np.asarray(I)
    Pt = np.zeros((len(I), len(I)))
    load_norm = float(np.linalg.norm(f0))
    pos = {int(d): k for k, d in enumerate(I)}
    owner = model.dof_node()
    for node in np.unique(owner[I]):
        dofs = model.dof_map[node]
        force = np.array([f0[d] if d != FIXED else 0.0 for d in dofs])
        block = spec.node_block(force, load_norm)
        sel = [j for j, d in enumerate(dofs) if d != FIXED]
        rows = [pos[int(dofs[j])] for j in sel]
        Pt[np.ix_(rows, rows)] = block[np.ix_(sel, sel)]
    return Pt


@dataclass
class LoadCase:
    """Nominal load with its perturbation shape, stored on the loaded block."""

    f0: np.ndarray
    I: np.ndarray
    P_tilde: np.ndarray
    n: int

    @classmethod
    def from_spec(cls, f0, model: StructuralModel, spec: EllipsoidSpec) -> "LoadCase":
        f0 = np.asarray(f0, float)
        I, _ = index_sets(f0, model)
        return cls(f0, I, build_perturbation(f0, I, spec, model), model.n)

    @property
    def J(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n), self.I)

    @property
    def f_tilde(self) -> np.ndarray:
        return self.f0[self.I]

    def P(self) -> np.ndarray:
        """Dense n x n perturbation matrix (zero outside the I block)."""
        P = np.zeros((self.n, self.n))
        P[np.ix_(self.I, self.I)] = self.P_tilde
        return P

    def perturbed(self, g_tilde) -> np.ndarray:
        f = self.f0.copy()
        f[self.I] += self.P_tilde @ np.asarray(g_tilde, float)
        return f


def reduced_compliance_matrix(
    model: StructuralModel,
    x,
    I,
    fac: Factorization | None = None,
    literal: bool = False,
) -> np.ndarray:
    """``S = (K(x)^{-1})_{II}`` from ``|I|`` solves with unit vectors.

    ``f^T K^{-1} f = f_I^T S f_I`` for every ``f`` supported on ``I``.  It is
    also the inverse of the statically condensed stiffness on ``I``.

    ``literal=True`` returns ``(K^{-1})_{II} - (K^{-1})_{IJ} ((K^{-1})_{JJ})^{-1} (K^{-1})_{JI}``
    instead (Schur complement within the inverse, which equals ``(K_{II})^{-1}``).
    It does not satisfy the identity above and is for comparison only.
    """
    I = np.asarray(I)
    fac = fac or model.factorize(x)
    W = np.empty((model.n, len(I)))
    for k, d in enumerate(I):
        e = np.zeros(model.n)
        e[d] = 1.0
        W[:, k] = fac.solve(e)
    S = W[I]
    S = 0.5 * (S + S.T)
    if not literal:
        return S
    J = np.setdiff1d(np.arange(model.n), I)
    if len(J) == 0:
        return S
    Kinv = np.linalg.inv(fac.K.toarray())
    Kinv = 0.5 * (Kinv + Kinv.T)
    return S - Kinv[np.ix_(I, J)] @ np.linalg.solve(Kinv[np.ix_(J, J)], Kinv[np.ix_(J, I)])


@dataclass
class WorstCaseResult:
    g_max: np.ndarray  # embedded in n-space, zero on J
    g_tilde: np.ndarray
    lambda_max: float
    f_worst: np.ndarray
    c_worst: float
    c_nominal: float
    eig: InhomEigSolution = field(repr=False, default=None)
    mechanism: bool = False


def block_eigenproblem(S, P_tilde, f_tilde) -> InhomEigProblem:
    """``A g - b = lam g`` with ``A = P~^T S P~`` and ``b = -P~^T S f~``.

    Its largest eigenpair maximizes ``(f~ + P~ g)^T S (f~ + P~ g)`` over ``|g| <= 1``.
    """
    A = P_tilde.T @ S @ P_tilde
    return InhomEigProblem(0.5 * (A + A.T), -(P_tilde.T @ S @ f_tilde))


def maximize_on_block(S, P_tilde, f_tilde, tol: float = 1e-10) -> tuple[np.ndarray, InhomEigSolution, float]:
    """Worst perturbation ``g~`` on the loaded block and the compliance it produces."""
    S, P_tilde, f_tilde = (np.asarray(a, float) for a in (S, P_tilde, f_tilde))
    sol = solve_largest(block_eigenproblem(S, P_tilde, f_tilde), tol=tol)
    f = f_tilde + P_tilde @ sol.x
    return sol.x, sol, float(f @ S @ f)


def worst_case_load(model: StructuralModel, x, case: LoadCase, fac: Factorization | None = None) -> WorstCaseResult:
    """Most dangerous load in the case's ellipsoid for design ``x``."""
    fac = fac or model.factorize(x)
    S = reduced_compliance_matrix(model, x, case.I, fac)
    if not np.any(case.P_tilde):
        g = np.zeros(len(case.I))
        sol = InhomEigSolution(0.0, g, 0, 0.0, "trivial")
    else:
        g, sol, _ = maximize_on_block(S, case.P_tilde, case.f_tilde)
    f_worst = case.perturbed(g)
    # compliances through the same solve path as the multiload problem
    c_worst = float(f_worst @ fac.solve(f_worst))
    c_nom = float(case.f0 @ fac.solve(case.f0))
    g_full = np.zeros(case.n)
    g_full[case.I] = g
    return WorstCaseResult(g_full, g, sol.lam, f_worst, c_worst, c_nom, sol)


def void_mask(model: StructuralModel, x, feasible) -> np.ndarray:
    """Elements sitting at the solver's artificial floor (physically absent)."""
    floor = feasible.solver_floor(model.m)
    if feasible.x_lower >= floor:
        return np.zeros(model.m, bool)
    return np.asarray(x) <= floor * (1.0 + 1e-9)


def excites_mechanism(model: StructuralModel, x, void: np.ndarray, f: np.ndarray, rtol: float = 1e-8) -> bool:
    """True if ``f`` is not in the range of ``K`` once void elements are removed.

    Dense check through an eigendecomposition; such a load would meet zero
    stiffness and its compliance is infinite.
    """
    if not void.any():
        return False
    xs = np.where(void, 0.0, np.asarray(x, float))
    K = model.assemble(xs).toarray()
    w, Q = np.linalg.eigh(K)
    null = w <= 1e-10 * max(w.max(), 1e-300)
    if not null.any():
        return False
    comp = Q[:, null].T @ f
    return bool(np.linalg.norm(comp) > rtol * np.linalg.norm(f))


@dataclass
class Vulnerability:
    V: float
    c_star: float
    c_rob: float
    cases: list[WorstCaseResult]

    def robust(self, eps: float = 1e-6) -> bool:
        return self.V <= 1.0 + eps

    def almost_robust(self, robust_tol: float = ROBUST_TOL) -> bool:
        return self.V <= robust_tol


def vulnerability(
    problem: MultiLoadProblem,
    x,
    cases: list[LoadCase],
    detect_mechanisms: bool = True,
    workers: int | None = None,
) -> Vulnerability:
    """Ratio of the worst perturbed compliance to the worst compliance of ``problem.loads``.

    Elements at the solver's floor are treated as absent when checking
    whether a worst-case load meets a mechanism; in that case ``V = inf``.
    The cases are independent and share one factorization; with
    ``workers > 1`` they are evaluated in a thread pool.
    """
    model = problem.model
    feas = problem.feasible
    xe = np.maximum(np.asarray(x, float), feas.solver_floor(model.m))
    fac = model.factorize(xe)
    c_star = float(max(f @ fac.solve(f) for f in problem.loads))
    workers = default_workers() if workers is None else workers
    if workers > 1 and len(cases) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(cases))) as pool:
            results = list(pool.map(lambda c: worst_case_load(model, xe, c, fac), cases))
    else:
        results = [worst_case_load(model, xe, case, fac) for case in cases]
    c_rob = max(r.c_worst for r in results)
    V = c_rob / c_star
    if detect_mechanisms:
        void = void_mask(model, x, feas)
        if void.any():
            for r in results:
                r.mechanism = excites_mechanism(model, x, void, r.f_worst)
    if V > INF_RATIO or any(r.mechanism for r in results):
        V = np.inf
    return Vulnerability(V, c_star, c_rob, results)
