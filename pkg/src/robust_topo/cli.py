"""``robust-topo`` command line interface.

Exit codes: 0 on a robust / almost robust result (or a finished nominal or
audit run), 2 when the outer iteration limit is hit, 1 on errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import io as rio
from .robust import audit_report, nominal, robustify
from .uncertainty import default_workers

log = logging.getLogger("robust_topo")

EXIT_OK, EXIT_ERROR, EXIT_LIMIT = 0, 1, 2


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robust-topo", description="Robust worst-case multiple-load topology optimization.")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="solve a problem file")
    run.add_argument("spec", help="problem JSON file, or the name of a shipped example (example1..example4)")
    run.add_argument("--mode", choices=("robustify", "audit", "nominal"), help="override run.mode")
    run.add_argument("--out", help="output directory for report and drawings (overrides run.out)")
    run.add_argument("--seed", type=int, default=0, help="recorded for reproducibility; all algorithms are deterministic")
    run.add_argument("--tol", type=float, help="certified relative gap of each multiple-load solve (overrides run.solver_tol)")
    sub.add_parser("examples", help="list shipped example problems")
    return ap


def _resolve_spec(name: str) -> Path:
    p = Path(name)
    if p.exists() or name not in rio.EXAMPLES:
        return p
    return rio.example_path(name)


def _write_outputs(out: Path, parsed, report) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_bytes(rio.render_report(report, "text"))
    (out / "report.csv").write_bytes(rio.render_report(report, "csv"))
    (out / "problem.json").write_text(rio.dump_spec(parsed.spec), encoding="utf-8")
    last = report.records[-1]
    worst = [w.f_worst for w in last.worst]
    svg, csv = rio.render_design(parsed.problem.model, report.final_design, parsed.problem.loads, worst)
    (out / "design.svg").write_bytes(svg)
    (out / "design.csv").write_bytes(csv)


def run(args) -> int:
    parsed = rio.parse_spec(_resolve_spec(args.spec))
    mode = args.mode or parsed.mode
    config = parsed.config
    if args.tol is not None:
        config.solver_tol = args.tol
    log.info("mode %s, seed %d, %d element(s), %d load case(s)", mode, args.seed, parsed.problem.model.m, parsed.problem.L)
    if mode == "robustify":
        report = robustify(parsed.problem, config)
    elif mode == "nominal":
        report = nominal(parsed.problem, config)
    else:
        if parsed.design is None:
            raise rio.SpecError("run.design: required in audit mode")
        report = audit_report(parsed.problem, parsed.design, config)
    sys.stdout.write(rio.render_report(report, "text").decode("utf-8"))
    out = args.out or parsed.out
    if out:
        _write_outputs(Path(out), parsed, report)
    return EXIT_LIMIT if report.status == "iteration_limit" else EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "examples":
        for name in rio.EXAMPLES:
            print(f"{name}\t{rio.example_path(name)}")
        return EXIT_OK
    try:
        with threadpool_limits(limits=default_workers()):
            return run(args)
    except Exception as exc:  # report, don't dump a traceback
        log.debug("failure", exc_info=True)
        print(f"robust-topo: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
