"""Iterative robustification: append worst-case loads until the design is almost robust.

Each outer iteration solves the current multiple-load problem, evaluates the
most dangerous load in every original case's uncertainty ellipsoid, and adds
those loads whose compliance exceeds ``robust_tol`` times the current
worst-case compliance.  Appended loads are ordinary load cases; only the
nominal cases carry ellipsoids (unless ``perturb_appended`` is set).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .design import MultiLoadProblem, MultiLoadResult, compliances, solve_multiload
from .uncertainty import (
    ROBUST_TOL,
    EllipsoidSpec,
    LoadCase,
    Vulnerability,
    WorstCaseResult,
    vulnerability,
)

log = logging.getLogger(__name__)

DUPLICATE_RTOL = 1e-9


@dataclass
class RobustConfig:
    robust_tol: float = ROBUST_TOL
    max_outer_iters: int = 20
    ellipsoid: EllipsoidSpec = field(default_factory=EllipsoidSpec)
    solver_tol: float = 1e-5
    solver_max_iters: int = 500
    perturb_appended: bool = False
    detect_mechanisms: bool = True

    def __post_init__(self):
        if not self.robust_tol >= 1.0:
            raise ValueError("robust_tol must be >= 1")
        if int(self.max_outer_iters) < 1:
            raise ValueError("max_outer_iters must be >= 1")


@dataclass
class IterationRecord:
    iter: int
    V: float
    compl: float
    compl0: float
    loads_in: list  # loads appended just before this solve (nominal loads at iter 0)
    cases_in: list  # original case index for each entry of loads_in
    worst: list[WorstCaseResult] = field(default_factory=list, repr=False)
    R: list = field(default_factory=list)
    appended: list = field(default_factory=list)  # loads appended after this iteration
    gap: float = 0.0


@dataclass
class RobustReport:
    records: list[IterationRecord]
    final_design: np.ndarray | None
    status: str
    accumulated_loads: list
    R_history: list
    nominal_loads: list
    f_hat: float = math.nan
    solves: int = 0
    skipped_duplicates: int = 0
    case_dofs: list = field(default_factory=list)  # loaded DOFs I of each original case

    @property
    def final_V(self) -> float:
        return self.records[-1].V if self.records else math.nan


def _cases_for(problem: MultiLoadProblem, loads, spec: EllipsoidSpec) -> list[LoadCase]:
    return [LoadCase.from_spec(f, problem.model, spec) for f in loads]


def _is_duplicate(f, loads) -> bool:
    nf = np.linalg.norm(f)
    return any(np.linalg.norm(f - g) <= DUPLICATE_RTOL * max(nf, np.linalg.norm(g)) for g in loads)


def robustify(problem: MultiLoadProblem, config: RobustConfig | None = None) -> RobustReport:
    """Outer loop of the robust design algorithm.

    Returns a report with one record per solved multiple-load problem.  If
    a solve fails, the exception is re-raised with the partial report
    attached as ``exc.report``.
    """
    config = config or RobustConfig()
    nominal = [f.copy() for f in problem.loads]
    cases = _cases_for(problem, nominal, config.ellipsoid)
    case_of = list(range(len(nominal)))  # original case behind each accumulated load
    F = list(nominal)
    f_hat = float(min(np.linalg.norm(f) for f in nominal))
    log.debug("smallest nominal load norm %.6g", f_hat)

    records: list[IterationRecord] = []
    R_history: list = []
    report = RobustReport(records, None, "iteration_limit", F, R_history, nominal, f_hat)
    report.case_dofs = [c.I for c in cases]
    loads_in, cases_in = list(nominal), list(case_of)

    for s in range(config.max_outer_iters + 1):
        current = problem.with_loads(F)
        try:
            res: MultiLoadResult = solve_multiload(
                current, tol=config.solver_tol, max_iters=config.solver_max_iters
            )
        except Exception as exc:  # partial report travels with the error
            exc.report = report
            raise
        report.solves += 1
        x = res.x
        report.final_design = x
        c_s = res.worst
        c_nom = compliances(problem.model, x, nominal)[0]
        compl0 = float(c_nom.max())

        pert = cases
        if config.perturb_appended and len(F) > len(nominal):
            pert = cases + _cases_for(problem, F[len(nominal):], config.ellipsoid)
        vul: Vulnerability = vulnerability(current, x, pert, detect_mechanisms=config.detect_mechanisms)
        V = vul.V
        rec = IterationRecord(s, V, c_s, compl0, loads_in, cases_in, vul.cases, gap=res.gap)
        records.append(rec)

        # cases whose worst load beats the tolerance
        R = [
            k
            for k, w in enumerate(vul.cases)
            if w.mechanism or w.c_worst > config.robust_tol * c_s
        ]
        R_history.append(R)
        rec.R = R
        log.info("iter %d: V=%.4g compl=%.6g compl0=%.6g R=%s", s, V, c_s, compl0, R)
        if not R:
            report.status = "robust" if V <= 1.0 + 1e-6 else "almost_robust"
            return report
        if s == config.max_outer_iters:
            break

        loads_in, cases_in = [], []
        for k in R:
            f = vul.cases[k].f_worst
            if _is_duplicate(f, F):
                report.skipped_duplicates += 1
                log.warning("worst-case load of case %d duplicates an existing load; skipped", k)
                continue
            F.append(f)
            origin = case_of[k]
            case_of.append(origin)
            loads_in.append(f)
            cases_in.append(origin)
        rec.appended = list(loads_in)
        if not loads_in:
            # nothing new to add: the loop would cycle
            report.status = "iteration_limit"
            return report

    report.status = "iteration_limit"
    return report


def nominal(problem: MultiLoadProblem, config: RobustConfig | None = None) -> RobustReport:
    """Solve the nominal problem once and evaluate its vulnerability (no robustification)."""
    config = config or RobustConfig()
    res = solve_multiload(problem, tol=config.solver_tol, max_iters=config.solver_max_iters)
    return _single_record(problem, res.x, config, res.worst, res.gap, solves=1)


def audit_report(problem: MultiLoadProblem, x, config: RobustConfig | None = None) -> RobustReport:
    """One-record report for a user-supplied design."""
    config = config or RobustConfig()
    x = np.asarray(x, float)
    c = compliances(problem.model, np.maximum(x, problem.feasible.solver_floor(problem.model.m)), problem.loads)[0]
    return _single_record(problem, x, config, float(c.max()), math.nan, solves=0)


def _single_record(problem, x, config, compl, gap, solves) -> RobustReport:
    cases = _cases_for(problem, problem.loads, config.ellipsoid)
    vul = vulnerability(problem, x, cases, detect_mechanisms=config.detect_mechanisms)
    loads = list(problem.loads)
    rec = IterationRecord(0, vul.V, compl, compl, loads, list(range(len(loads))), vul.cases, gap=gap)
    rec.R = [k for k, w in enumerate(vul.cases) if w.mechanism or w.c_worst > config.robust_tol * compl]
    status = "robust" if vul.robust() else "almost_robust" if vul.almost_robust(config.robust_tol) else "not_robust"
    report = RobustReport([rec], x, status, loads, [rec.R], loads, solves=solves)
    report.case_dofs = [c.I for c in cases]
    return report


def audit(
    problem: MultiLoadProblem,
    x,
    config: RobustConfig | None = None,
    reference_loads=None,
) -> tuple[float, list[WorstCaseResult]]:
    """Vulnerability of an arbitrary design.

    Worst-case loads are taken around ``problem``'s nominal loads.  The
    reference compliance is the worst over ``reference_loads`` (default: the
    nominal loads); pass a robustification's accumulated loads to measure
    against the same ``c_s`` the outer loop used.
    """
    config = config or RobustConfig()
    x = np.asarray(x, float)
    if x.shape != (problem.model.m,):
        raise ValueError(f"design has shape {x.shape}, model has {problem.model.m} elements")
    cases = _cases_for(problem, problem.loads, config.ellipsoid)
    ref = problem if reference_loads is None else problem.with_loads(reference_loads)
    vul = vulnerability(ref, x, cases, detect_mechanisms=config.detect_mechanisms)
    return vul.V, vul.cases
