import numpy as np
import pytest

from robust_topo.design import FeasibleSet, MultiLoadProblem
from robust_topo.mesh import build_ground_structure
from robust_topo.robust import RobustConfig, audit, audit_report, nominal, robustify
from robust_topo.uncertainty import EllipsoidSpec

FLAT = EllipsoidSpec("flat", 1e-3, 3.0)


@pytest.fixture(scope="module")
def toy():
    m = build_ground_structure(2, 3, 1.0, lambda i, j, x, y: i == 0, spacing_y=0.5)
    f = np.zeros(m.n)
    f[m.dof_map[4]] = (10.0, 0.0)
    return MultiLoadProblem(m, [f], FeasibleSet(100.0))


@pytest.fixture(scope="module")
def toy_report(toy):
    return robustify(toy, RobustConfig(ellipsoid=FLAT))


def test_toy_sequence(toy, toy_report):
    rep = toy_report
    assert rep.status == "robust"
    assert [r.iter for r in rep.records] == [0, 1, 2]
    assert rep.records[0].V == np.inf
    assert 1.05 < rep.records[1].V < 5
    assert rep.records[2].V <= 1.0 + 1e-6
    dof = toy.model.dof_map[4]
    up, down = rep.records[0].appended[0][dof], rep.records[1].appended[0][dof]
    assert up[0] == pytest.approx(10.0, abs=1e-2) and down[0] == pytest.approx(10.0, abs=1e-2)
    assert abs(up[1]) == pytest.approx(3.0, abs=1e-3)
    assert up[1] * down[1] < 0  # the second appended load pushes the other way
    assert len(rep.accumulated_loads) == 3
    assert rep.R_history == [[0], [0], []]
    assert rep.solves == 3


def test_record_invariants(toy_report):
    recs = toy_report.records
    for r in recs:
        assert r.compl0 <= r.compl * (1 + 1e-9)
        assert r.gap <= 1e-5
    compl = [r.compl for r in recs]
    assert all(b >= a * (1 - 1e-6) for a, b in zip(compl, compl[1:]))
    # rows list the loads entering each solve: nominal first, then the appended ones
    assert np.allclose(recs[0].loads_in[0], toy_report.nominal_loads[0])
    assert all(np.allclose(a, b) for a, b in zip(recs[1].loads_in, recs[0].appended))


def test_final_design_passes_audit(toy, toy_report):
    cfg = RobustConfig(ellipsoid=FLAT)
    V, cases = audit(toy, toy_report.final_design, cfg, reference_loads=toy_report.accumulated_loads)
    assert V <= cfg.robust_tol
    # measured against its own nominal compliance the design looks worse, but stays finite
    V_nom, _ = audit(toy, toy_report.final_design, cfg)
    assert V <= V_nom < np.inf


def test_nominal_optimum_audits_to_infinity(toy):
    rep = nominal(toy, RobustConfig(ellipsoid=FLAT))
    assert rep.records[0].V == np.inf
    assert rep.solves == 1
    assert rep.status == "not_robust"
    V, _ = audit(toy, rep.final_design, RobustConfig(ellipsoid=FLAT))
    assert V == np.inf


def test_zero_uncertainty_single_solve(toy):
    rep = robustify(toy, RobustConfig(ellipsoid=EllipsoidSpec("ball", 0.0)))
    assert rep.solves == 1
    assert rep.status == "robust"
    assert rep.records[0].V == 1.0
    assert rep.R_history == [[]]


def test_ball_shrinking_vulnerability_decreases(toy):
    x = np.full(toy.model.m, 100.0 / toy.model.m)
    Vs = [audit(toy, x, RobustConfig(ellipsoid=EllipsoidSpec("ball", t)))[0] for t in (0.3, 0.03, 0.003)]
    assert Vs[0] > Vs[1] > Vs[2] > 1.0
    assert Vs[2] - 1.0 < 1e-2


def test_iteration_limit_status(toy):
    rep = robustify(toy, RobustConfig(ellipsoid=FLAT, max_outer_iters=1))
    assert rep.status == "iteration_limit"
    assert len(rep.records) == 2
    assert rep.records[-1].V > 1.05


def test_config_validation():
    with pytest.raises(ValueError):
        RobustConfig(robust_tol=0.9)
    with pytest.raises(ValueError):
        RobustConfig(max_outer_iters=0)


def test_audit_rejects_wrong_shape(toy):
    with pytest.raises(ValueError):
        audit(toy, np.ones(3))


def test_audit_report_single_row(toy, toy_report):
    rep = audit_report(toy, toy_report.final_design, RobustConfig(ellipsoid=FLAT))
    assert len(rep.records) == 1
    assert rep.records[0].compl == pytest.approx(rep.records[0].compl0)
    assert rep.solves == 0


def test_duplicate_loads_are_not_appended(toy, monkeypatch):
    # a worst-case load equal to one already in F is skipped instead of cycling
    import robust_topo.robust as rb
    from robust_topo.uncertainty import Vulnerability, WorstCaseResult

    def fake(problem, x, cases, **kw):
        f = problem.loads[0]
        w = WorstCaseResult(np.zeros_like(f), np.zeros(2), 0.0, f.copy(), 10.0, 1.0)
        return Vulnerability(10.0, 1.0, 10.0, [w])

    monkeypatch.setattr(rb, "vulnerability", fake)
    rep = rb.robustify(toy, RobustConfig(ellipsoid=FLAT))
    assert rep.skipped_duplicates == 1
    assert rep.solves == 1
    assert rep.status == "iteration_limit"
    assert len(rep.accumulated_loads) == 1


def test_solver_failure_carries_partial_report(toy):
    cfg = RobustConfig(ellipsoid=FLAT, solver_max_iters=1)
    with pytest.raises(Exception) as info:
        robustify(toy, cfg)
    assert info.value.report.records == []
