"""Worst-case multiple-load minimum compliance design.

Solves ``min_{x in X} max_l f_l^T K(x)^{-1} f_l`` where
``X = {x : sum(x) <= v, x_lower <= x_i <= x_upper}``.

Writing every element matrix as ``K_i = G_i G_i^T``, the compliance is

    f^T K(x)^{-1} f = min { sum_i |s_i|^2 / x_i  :  sum_i G_i s_i = f },

so the epigraph form of the minimax problem is a second-order cone program
(one rotated cone per element and load).  It is handed to an interior-point
conic solver through cvxpy.  The answer is not trusted blindly: convexity of
every compliance in x gives a lower bound from the Lagrangian dual, computed
here from our own stiffness solves.  For any trial displacements ``u_l`` and
load weights ``z >= 0``,

    OPT >= sum_l z_l (f_l.u_l)^2 / max_{y in X} sum_i y_i sum_l z_l u_l^T K_i u_l,

and the maximization over X is a greedy fractional knapsack.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .mesh import FIXED, StructuralModel

log = logging.getLogger(__name__)

FLOOR_RATIO = 1e-6


class ConvergenceError(RuntimeError):
    """Raised when the minimax solver cannot certify its tolerance.

    The best design found and its certified gap are attached as ``result``.
    """

    def __init__(self, msg: str, result: "MultiLoadResult"):
        super().__init__(msg)
        self.result = result


@dataclass(frozen=True)
class FeasibleSet:
    v: float
    x_lower: float = 0.0
    x_upper: float = np.inf

    def __post_init__(self):
        if not self.v > 0:
            raise ValueError("volume bound v must be positive")
        if not 0.0 <= self.x_lower <= self.x_upper:
            raise ValueError("bounds must satisfy 0 <= x_lower <= x_upper")

    def check(self, m: int):
        if m * self.x_lower > self.v:
            raise ValueError("m * x_lower exceeds the volume bound")

    def solver_floor(self, m: int) -> float:
        """Lower bound used inside the optimizer; keeps K(x) positive definite."""
        return max(self.x_lower, min(FLOOR_RATIO * self.v / m, self.x_upper))

    def contains(self, x, rtol: float = 1e-9) -> bool:
        x = np.asarray(x)
        return bool(
            np.all(x >= self.x_lower * (1 - rtol))
            and np.all(x <= self.x_upper * (1 + rtol))
            and x.sum() <= self.v * (1 + rtol)
        )


@dataclass
class MultiLoadProblem:
    model: StructuralModel
    loads: list
    feasible: FeasibleSet

    def __post_init__(self):
        self.loads = [np.asarray(f, float) for f in self.loads]
        if not self.loads:
            raise ValueError("loads: at least one load case required")
        for k, f in enumerate(self.loads):
            if f.shape != (self.model.n,):
                raise ValueError(f"load {k} has shape {f.shape}, model has {self.model.n} free DOFs")
            if not np.any(f):
                raise ValueError(f"load {k} is zero")
        self.feasible.check(self.model.m)

    @property
    def L(self) -> int:
        return len(self.loads)

    def with_loads(self, loads) -> "MultiLoadProblem":
        return MultiLoadProblem(self.model, list(loads), self.feasible)


def compliance(problem: MultiLoadProblem, x, load: int, gradient: bool = False):
    """Compliance of load case ``load`` at ``x``; with ``gradient`` also dc/dx.

    The sensitivity is ``dc/dx_i = -u^T K_i u`` on element ``i``'s DOFs.
    """
    model = problem.model
    f = problem.loads[load]
    u = model.factorize(x).solve(f)
    c = float(f @ u)
    if gradient:
        return c, -model.element_energies(u)
    return c


def compliances(model: StructuralModel, x, loads) -> tuple[np.ndarray, np.ndarray]:
    """Compliances of all loads and the (L, n) displacement array, one factorization."""
    fac = model.factorize(x)
    U = np.array([fac.solve(f) for f in loads])
    c = np.einsum("ij,ij->i", np.asarray(loads), U)
    return c, U


def worst_compliance(problem: MultiLoadProblem, x) -> float:
    return float(compliances(problem.model, x, problem.loads)[0].max())


def project(y, v: float, lo: float, hi: float) -> np.ndarray:
    """Euclidean projection onto ``{x : sum(x) <= v, lo <= x <= hi}``.

    The projection is ``clip(y - t, lo, hi)`` with the smallest ``t >= 0``
    meeting the volume bound.  ``s(t) = sum(clip(y - t, lo, hi))`` is piecewise
    linear and nonincreasing; walking its sorted breakpoints costs O(m log m).
    """
    y = np.asarray(y, float)
    x = np.clip(y, lo, hi)
    s0 = float(x.sum())
    if s0 <= v:
        return x
    enter = y - hi  # element starts sliding down
    leave = y - lo  # element reaches the lower bound
    slope0 = -int(np.count_nonzero((enter <= 0.0) & (leave > 0.0)))
    bp = np.concatenate((enter[enter > 0.0], leave[leave > 0.0]))
    dslope = np.concatenate((-np.ones(np.count_nonzero(enter > 0.0)), np.ones(np.count_nonzero(leave > 0.0))))
    order = np.argsort(bp, kind="stable")
    bp, dslope = bp[order], dslope[order]
    knots = np.concatenate(([0.0], bp))
    slopes = slope0 + np.concatenate(([0.0], np.cumsum(dslope)))  # slope right of each knot
    values = s0 + np.concatenate(([0.0], np.cumsum(slopes[:-1] * np.diff(knots))))
    k = int(np.searchsorted(-values, -v, side="left"))  # first knot with s <= v
    if k >= len(knots):
        raise ValueError("volume bound infeasible for the lower bounds")
    if values[k] == v:
        t = knots[k]
    else:
        t = knots[k - 1] + (values[k - 1] - v) / (-slopes[k - 1])
    return np.clip(y - t, lo, hi)


def knapsack_max(e: np.ndarray, v: float, lo: float, hi: float) -> float:
    """``max sum(y*e)`` over X for ``e >= 0``: all at ``lo``, then fill the largest."""
    m = len(e)
    base = lo * float(e.sum())
    budget = v - m * lo
    cap = hi - lo
    es = np.sort(e)[::-1]
    if not np.isfinite(cap):
        return base + budget * float(es[0])
    full = m if cap <= 0 else min(int(budget // cap), m)
    val = base + cap * float(es[:full].sum())
    if full < m:
        val += (budget - full * cap) * float(es[full])
    return val


def _ratio_bound(a: np.ndarray, E: np.ndarray, v, lo, hi) -> tuple[float, np.ndarray]:
    """Maximize ``sum(z*a**2) / h(z @ E)`` over load weights ``z >= 0``.

    ``h`` is the knapsack maximum over X.  Every ``z`` gives a valid bound and
    the ratio is homogeneous of degree zero, so normalizing ``h(z @ E) <= 1``
    turns the search into a linear program; ``h`` is written through its LP
    dual ``h(e) = lo*sum(e) + min {mu*B + cap*sum(nu) : nu_i >= e_i - mu}``.
    """
    a2 = np.asarray(a, float) ** 2
    E = np.asarray(E, float)
    L, m = E.shape
    keep = a2 > 0.0
    z = np.zeros(L)
    if not keep.any():
        return 0.0, np.full(L, 1.0 / L)
    # normalize each trial field so that a_l = 1, then the energies globally
    En = E[keep] / a2[keep, None]
    escale = float(En.max())
    if escale <= 0.0:
        return np.inf, np.full(L, 1.0 / L)
    En = En / escale
    Lk = int(keep.sum())
    budget = v - m * lo
    cap = hi - lo
    finite = np.isfinite(cap)
    nvar = Lk + 1 + (m if finite else 0)
    c = np.zeros(nvar)
    c[:Lk] = -1.0
    # row 0: lo*sum(e) + mu*B (+ cap*sum(nu)) <= 1 ; rows 1..m: e_i - mu (- nu_i) <= 0
    top = np.concatenate((lo * En.sum(axis=1), [budget], np.full(m, cap) if finite else []))
    body = [sp.csr_matrix(En.T), sp.csr_matrix(-np.ones((m, 1)))]
    if finite:
        body.append(-sp.identity(m, format="csr"))
    A = sp.vstack([sp.csr_matrix(top), sp.hstack(body)], format="csr")
    b = np.zeros(m + 1)
    b[0] = 1.0
    res = linprog(c, A_ub=A, b_ub=b, bounds=(0, None), method="highs")
    if res.status != 0:
        log.debug("bound LP failed: %s", res.message)
        return 0.0, np.full(L, 1.0 / L)
    q = np.maximum(res.x[:Lk], 0.0)
    z[keep] = q / a2[keep]
    z /= z.sum()
    # re-evaluate the bound at the LP weights directly (robust to LP round-off)
    den = knapsack_max(z @ E, v, lo, hi)
    val = float(z @ a2) / den if den > 0 else 0.0
    return val, z


def dual_bound(model: StructuralModel, loads, U, feasible: FeasibleSet) -> tuple[float, np.ndarray]:
    """Lagrangian lower bound from trial displacements ``U`` (one row per load)."""
    loads = np.asarray(loads, float)
    U = np.asarray(U, float)
    a = np.abs(np.einsum("ij,ij->i", loads, U))
    E = np.array([model.element_energies(u) for u in U])
    L = len(loads)
    lo = feasible.solver_floor(model.m)
    return _ratio_bound(a, E, feasible.v, lo, feasible.x_upper)


def certify(model: StructuralModel, x, loads, feasible: FeasibleSet, trial_U=()) -> tuple[float, np.ndarray, np.ndarray]:
    """Certified lower bound on the optimal worst compliance over X.

    The bound is evaluated at the equilibrium displacements of ``x`` and at
    any extra trial displacement sets; the best is kept.  Returns
    ``(bound, compliances at x, load weights of the best bound)``.
    """
    c, U = compliances(model, x, loads)
    lb, z = dual_bound(model, loads, U, feasible)
    for V in trial_U:
        lb2, z2 = dual_bound(model, loads, V, feasible)
        if lb2 > lb:
            lb, z = lb2, z2
    return lb, c, z


@dataclass
class MultiLoadResult:
    x: np.ndarray
    worst: float
    lower_bound: float
    compliances: np.ndarray
    weights: np.ndarray
    iterations: int
    status: str = ""
    history: list = field(default_factory=list, repr=False)

    @property
    def gap(self) -> float:
        return self.worst / self.lower_bound - 1.0 if self.lower_bound > 0 else np.inf


def element_factors(model: StructuralModel, rtol: float = 1e-10) -> tuple[sp.csr_matrix, list[np.ndarray]]:
    """Factor every element matrix as ``K_i = G_i G_i^T`` on the free DOFs.

    Returns the sparse ``G`` (n x r) with all element columns side by side and,
    per element, the indices of its columns.
    """
    rows, cols, vals, owned = [], [], [], []
    col = 0
    for i in range(model.m):
        lam, vec = np.linalg.eigh(model.unit_stiffness[i])
        keep = lam > rtol * lam.max()
        gi = vec[:, keep] * np.sqrt(lam[keep])
        dofs = model.edofs[i]
        free = dofs != FIXED
        for k in range(gi.shape[1]):
            rows.append(dofs[free])
            vals.append(gi[free, k])
            cols.append(np.full(int(free.sum()), col + k))
        owned.append(np.arange(col, col + gi.shape[1]))
        col += gi.shape[1]
    G = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(model.n, col),
    )
    return G, owned


def _conic_program(model: StructuralModel, loads: np.ndarray, feas: FeasibleSet):
    m = model.m
    L = len(loads)
    G, owned = element_factors(model)
    # scaled unknowns: y = x / v and element forces for loads / fscale
    y = cp.Variable(m)
    S = cp.Variable((G.shape[1], L))
    T = cp.Variable((m, L))
    gamma = cp.Variable()
    fpar = cp.Parameter((model.n, L))
    equilibrium = G @ S == fpar
    cons = [y >= feas.solver_floor(m) / feas.v, cp.sum(y) <= 1.0, equilibrium]
    if np.isfinite(feas.x_upper):
        cons.append(y <= feas.x_upper / feas.v)
    ranks = np.array([len(o) for o in owned])
    for q in np.unique(ranks):
        idx = np.nonzero(ranks == q)[0]
        cidx = np.array([owned[i] for i in idx])
        for k in range(L):
            # t_i y_i >= |s_i|^2  <=>  |(2 s_i, t_i - y_i)| <= t_i + y_i
            parts = [2.0 * S[cidx[:, j], k] for j in range(q)]
            parts.append(T[idx, k] - y[idx])
            cons.append(cp.SOC(T[idx, k] + y[idx], cp.vstack(parts), axis=0))
    cons += [cp.sum(T[:, k]) <= gamma for k in range(L)]
    return cp.Problem(cp.Minimize(gamma), cons), y, fpar, equilibrium


def _snap_voids(model, x, loads, feas, trial, lb, c, w, tol):
    """Push near-floor elements exactly onto the floor if the certificate survives.

    Interior-point output leaves void elements slightly above the floor; on
    the floor they are recognized as absent members downstream.
    """
    lo = feas.solver_floor(model.m)
    for ratio in (1e-3, 1e-5, 1e-7):
        small = (x < ratio * feas.v / model.m) & (x > lo)
        if not small.any():
            break
        xs = np.where(small, lo, x)
        lb2, c2, w2 = certify(model, xs, loads, feas, trial)
        if c2.max() <= (1.0 + tol) * max(lb, lb2):
            return xs, max(lb, lb2), c2, w2 if lb2 >= lb else w
    return x, lb, c, w


# interior-point settings tried in turn until the certificate closes
SOLVER_LADDER = (
    {"tol_gap_abs": 1e-10, "tol_gap_rel": 1e-10, "tol_feas": 1e-10},
    {"tol_gap_abs": 1e-8, "tol_gap_rel": 1e-8, "tol_feas": 1e-8},
    {"tol_gap_abs": 1e-9, "tol_gap_rel": 1e-9, "tol_feas": 1e-9, "static_regularization_constant": 1e-7},
    {},
)


def _attempt(prob, y, equilibrium, model, loads, feas, tol, max_iters, settings) -> MultiLoadResult:
    lo = feas.solver_floor(model.m)
    try:
        with warnings.catch_warnings():
            # accuracy is judged by our own certificate below
            warnings.simplefilter("ignore", UserWarning)
            prob.solve(solver=cp.CLARABEL, max_iter=max_iters, **settings)
    except cp.SolverError as exc:
        log.debug("conic solver failed with %s: %s", settings, exc)
    trial = []
    if y.value is None:
        x = project(np.full(model.m, feas.v / model.m), feas.v, lo, feas.x_upper)
        iters = max_iters
    else:
        x = project(np.asarray(y.value) * feas.v, feas.v, lo, feas.x_upper)
        iters = int(prob.solver_stats.num_iters or 0)
        if equilibrium.dual_value is not None:
            # equilibrium multipliers are displacement fields
            trial.append(np.asarray(equilibrium.dual_value).T)
    lb, c, w = certify(model, x, loads, feas, trial)
    if y.value is not None:
        x, lb, c, w = _snap_voids(model, x, loads, feas, trial, lb, c, w, tol)
    return MultiLoadResult(x, float(c.max()), lb, c, w, iters, status=str(prob.status))


def solve_multiload(
    problem: MultiLoadProblem,
    tol: float = 1e-5,
    max_iters: int = 500,
    raise_on_failure: bool = True,
) -> MultiLoadResult:
    """Minimize the worst compliance over X to a certified relative gap ``tol``.

    Returns a design with ``max_l c_l(x) <= (1 + tol) * lower_bound``.  The
    bound comes from :func:`certify`; the conic solver's multipliers only
    serve as one more set of trial displacements.  ``max_iters`` caps the
    interior-point iterations.  If the certificate does not close, the conic
    solve is repeated with the next settings of :data:`SOLVER_LADDER`.
    """
    model = problem.model
    feas = problem.feasible
    loads = np.array(problem.loads)
    fscale = float(np.abs(loads).max())

    prob, y, fpar, equilibrium = _conic_program(model, loads, feas)
    fpar.value = loads.T / fscale
    best, history = None, []
    for settings in SOLVER_LADDER:
        attempt = _attempt(prob, y, equilibrium, model, loads, feas, tol, max_iters, settings)
        history.append((settings, attempt.gap))
        if best is None or attempt.gap < best.gap:
            best = attempt
        if best.worst <= (1.0 + tol) * best.lower_bound:
            break
    result = best
    result.history = history
    log.debug("multiload solve: L=%d worst=%.6g bound=%.6g iters=%d", len(loads), result.worst, result.lower_bound, result.iterations)
    if not result.worst <= (1.0 + tol) * result.lower_bound:
        msg = f"minimax solver stopped with relative gap {result.gap:.3e} > {tol:.1e} (status {result.status})"
        if raise_on_failure:
            raise ConvergenceError(msg, result)
        log.warning(msg)
    return result
