"""Problem files, report tables and design drawings.

A problem file is JSON validated against ``data/problem.schema.json``, which
also documents every default.  Node references are either plain node ids or
``[i, j]`` grid indices.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import re
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from .design import FeasibleSet, MultiLoadProblem
from .mesh import FIXED, StructuralModel, build_ground_structure, build_sheet_mesh, build_truss
from .robust import RobustConfig, RobustReport
from .uncertainty import EllipsoidSpec

log = logging.getLogger(__name__)

EXAMPLES = ("example1", "example2", "example3", "example4")
OMIT_RATIO = 1e-3


class SpecError(ValueError):
    """Invalid problem file; the message names the offending field and line."""


class UnknownKeyWarning(UserWarning):
    pass


def _data(name: str):
    return resources.files("robust_topo").joinpath("data", name)


def load_schema() -> dict:
    return json.loads(_data("problem.schema.json").read_text(encoding="utf-8"))


def example_path(name: str) -> Path:
    """Filesystem path of a shipped example (``example1`` ... ``example4``)."""
    if name not in EXAMPLES:
        raise KeyError(f"unknown example {name!r}; available: {', '.join(EXAMPLES)}")
    with resources.as_file(_data(f"examples/{name}.json")) as p:
        return Path(p)


# ---------------------------------------------------------------- validation


def _line_of(text: str, path) -> int:
    """Best-effort line number of a JSON path inside the source text."""
    pos = 0
    for part in path:
        if isinstance(part, str):
            hit = text.find(f'"{part}"', pos)
            if hit < 0:
                break
            pos = hit
    return text.count("\n", 0, pos) + 1


def _fmt_path(path) -> str:
    out = ""
    for part in path:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out


def _resolve(schema: dict, root: dict) -> dict:
    while "$ref" in schema:
        ref = schema["$ref"]
        node = root
        for part in ref.lstrip("#/").split("/"):
            node = node[part]
        schema = node
    return schema


def _walk(instance, schema: dict, root: dict, path: list, visit):
    """Apply ``visit(obj, schema, path)`` to every object along the schema's ``properties``."""
    schema = _resolve(schema, root)
    if isinstance(instance, dict) and "properties" in schema:
        visit(instance, schema, path)
        for key, sub in schema["properties"].items():
            if key in instance:
                _walk(instance[key], sub, root, path + [key], visit)
    elif isinstance(instance, list) and isinstance(schema.get("items"), dict):
        for k, item in enumerate(instance):
            _walk(item, schema["items"], root, path + [k], visit)


def _warn_unknown(instance, schema, text):
    def visit(obj, sch, path):
        for key in obj:
            if key not in sch["properties"]:
                where = _fmt_path(path + [key])
                msg = f"{where}: unknown key ignored (line {_line_of(text, path + [key])})"
                log.warning(msg)
                warnings.warn(msg, UnknownKeyWarning, stacklevel=4)

    _walk(instance, schema, schema, [], visit)


def _apply_defaults(instance, schema):
    def visit(obj, sch, path):
        for key, sub in sch["properties"].items():
            sub = _resolve(sub, schema)
            if key not in obj and "default" in sub:
                obj[key] = copy.deepcopy(sub["default"])

    # defaults may create nested objects that have defaults of their own
    for _ in range(3):
        _walk(instance, schema, schema, [], visit)


def validate_spec(raw: dict, text: str = "") -> dict:
    """Schema-check ``raw`` and return a copy with all defaults filled in."""
    schema = load_schema()
    errors = sorted(Draft202012Validator(schema).iter_errors(raw), key=lambda e: (len(e.absolute_path), e.path))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        if err.validator == "required":
            missing = re.findall(r"'([^']+)' is a required property", err.message)
            name = _fmt_path(path + missing[:1])
            raise SpecError(f"{name}: required (line {_line_of(text, path)})")
        raise SpecError(f"{_fmt_path(path) or '<root>'}: {err.message} (line {_line_of(text, path)})")
    _warn_unknown(raw, schema, text)
    spec = copy.deepcopy(raw)
    _apply_defaults(spec, schema)
    return spec


# ---------------------------------------------------------------- building


@dataclass
class ParsedSpec:
    """A validated problem file: the problem, run options and normalized JSON."""

    problem: MultiLoadProblem
    config: RobustConfig
    spec: dict
    mode: str = "robustify"
    design: np.ndarray | None = None
    out: str | None = None
    source: Path | None = None
    grid_shape: tuple | None = field(default=None, repr=False)


def _node_id(ref, grid_shape, n_nodes: int, where: str) -> int:
    if isinstance(ref, int):
        nid = ref
    else:
        if grid_shape is None:
            raise SpecError(f"{where}: [i, j] node references need a grid or mesh model")
        i, j = ref
        nx, ny = grid_shape
        if not (0 <= i < nx and 0 <= j < ny):
            raise SpecError(f"{where}: node {list(ref)} outside the {nx} x {ny} node grid")
        nid = i * ny + j
    if not 0 <= nid < n_nodes:
        raise SpecError(f"{where}: node {ref} does not exist")
    return nid


def _support_mask(spec_model: dict, grid_shape, n_nodes: int, text: str) -> tuple[np.ndarray, list[str]]:
    sup = spec_model.get("supports", {})
    fixed = np.zeros((n_nodes, 2), bool)
    for k, ref in enumerate(sup.get("nodes", [])):
        fixed[_node_id(ref, grid_shape, n_nodes, f"model.supports.nodes[{k}]")] = True
    for k, d in enumerate(sup.get("dofs", [])):
        nid = _node_id(d["node"], grid_shape, n_nodes, f"model.supports.dofs[{k}]")
        fixed[nid, "xy".index(d["dir"])] = True
    return fixed, list(sup.get("edges", []))


def build_model(spec_model: dict, text: str = "") -> tuple[StructuralModel, tuple | None]:
    """Structural model and its node-grid shape (None for explicit trusses)."""
    young = spec_model.get("young", 1.0)
    if spec_model["kind"] == "sheet":
        mesh = spec_model["mesh"]
        shape = (mesh["nx"] + 1, mesh["ny"] + 1)
        fixed, edges = _support_mask(spec_model, shape, shape[0] * shape[1], text)
        model = build_sheet_mesh(
            mesh["nx"],
            mesh["ny"],
            mesh["width"],
            mesh["height"],
            spec_model.get("poisson_ratio", 0.0),
            fixed_edge=edges,
            young=young,
            fixed_nodes=lambda i, j, x, y: fixed[i * shape[1] + j],
        )
        return model, shape
    if "grid" in spec_model:
        g = spec_model["grid"]
        shape = (g["nx"], g["ny"])
        fixed, edges = _support_mask(spec_model, shape, shape[0] * shape[1], text)
        nx, ny = shape

        def pred(i, j, x, y):
            on_edge = (
                ("left" in edges and i == 0)
                or ("right" in edges and i == nx - 1)
                or ("bottom" in edges and j == 0)
                or ("top" in edges and j == ny - 1)
            )
            return True if on_edge else fixed[i * ny + j]

        model = build_ground_structure(
            nx,
            ny,
            g.get("spacing", 1.0),
            pred,
            young=young,
            remove_overlaps=g.get("remove_overlaps", False),
            spacing_y=g.get("spacing_y"),
        )
        return model, shape
    coords = spec_model["nodes"]
    if spec_model.get("supports", {}).get("edges"):
        raise SpecError("model.supports.edges: edges need a grid or mesh model")
    fixed, _ = _support_mask(spec_model, None, len(coords), text)
    for k, (a, b) in enumerate(spec_model["bars"]):
        if not (0 <= a < len(coords) and 0 <= b < len(coords)) or a == b:
            raise SpecError(f"model.bars[{k}]: invalid node pair {[a, b]}")
    return build_truss(coords, [tuple(b) for b in spec_model["bars"]], fixed, young), None


def build_loads(spec_loads: list, model: StructuralModel, grid_shape, text: str = "") -> list[np.ndarray]:
    loads = []
    for k, case in enumerate(spec_loads):
        f = np.zeros(model.n)
        for p, point in enumerate(case):
            where = f"loads[{k}][{p}]"
            nid = _node_id(point["node"], grid_shape, model.n_nodes, where)
            for d, comp in enumerate(point["force"]):
                if comp == 0.0:
                    continue
                dof = model.dof_map[nid, d]
                if dof == FIXED:
                    raise SpecError(f"{where}: load applied to constrained DOF (line {_line_of(text, ['loads'])})")
                f[dof] += comp
        if not np.any(f):
            raise SpecError(f"loads[{k}]: load case is zero (line {_line_of(text, ['loads'])})")
        loads.append(f)
    return loads


def _config(spec: dict) -> RobustConfig:
    u, r = spec["uncertainty"], spec["run"]
    try:
        ell = EllipsoidSpec(u["kind"], u["tau"], u["major"], u["relative"], u["norm"])
    except ValueError as exc:
        raise SpecError(f"uncertainty: {exc}") from exc
    return RobustConfig(
        robust_tol=r["robust_tol"],
        max_outer_iters=r["max_outer_iters"],
        ellipsoid=ell,
        solver_tol=r["solver_tol"],
        solver_max_iters=r["solver_max_iters"],
        perturb_appended=r["perturb_appended"],
    )


def read_design_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    x = np.empty(len(rows))
    for row in rows:
        x[int(row["element"])] = float(row["x"])
    return x


def build_spec(raw: dict, text: str = "", base_dir: Path | None = None) -> ParsedSpec:
    """Validate a parsed JSON document and build the in-memory problem."""
    spec = validate_spec(raw, text)
    model, shape = build_model(spec["model"], text)
    loads = build_loads(spec["loads"], model, shape, text)
    fe = spec["feasible"]
    x_upper = math.inf if fe["x_upper"] is None else fe["x_upper"]
    try:
        feasible = FeasibleSet(fe["v"], fe["x_lower"], x_upper)
        problem = MultiLoadProblem(model, loads, feasible)
    except ValueError as exc:
        raise SpecError(f"feasible: {exc}") from exc
    run = spec["run"]
    design = run["design"]
    if isinstance(design, str):
        design = read_design_csv((base_dir or Path.cwd()) / design)
    if design is not None:
        design = np.asarray(design, float)
        if design.shape != (model.m,):
            raise SpecError(f"run.design: expected {model.m} values, got {design.shape[0]}")
    if run["mode"] == "audit" and design is None:
        raise SpecError("run.design: required in audit mode")
    return ParsedSpec(problem, _config(spec), spec, run["mode"], design, run["out"], grid_shape=shape)


def parse_spec(path) -> ParsedSpec:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"invalid JSON: {exc.msg} (line {exc.lineno})") from exc
    parsed = build_spec(raw, text, base_dir=path.parent)
    parsed.source = path
    return parsed


def parse_problem(path) -> tuple[MultiLoadProblem, RobustConfig]:
    """Read a problem file into a multiple-load problem and a robustification config."""
    parsed = parse_spec(path)
    return parsed.problem, parsed.config


def dump_spec(spec: dict) -> str:
    """Normalized JSON echo of a validated spec (defaults made explicit)."""
    return json.dumps(spec, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- reports


def fmt(v: float) -> str:
    """Four significant digits; infinity as ``Inf``."""
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "N/A"
    if math.isinf(v):
        return "Inf" if v > 0 else "-Inf"
    s = f"{v:.4g}"
    return "0" if s == "-0" else s


def _fmt_vec(v) -> str:
    return "[" + ", ".join(fmt(float(c)) for c in v) + "]"


def load_column(report: RobustReport, rec) -> str:
    """``f_s`` entry: loads entering this solve, per original case, ``N/A`` if absent."""
    parts = []
    for k, I in enumerate(report.case_dofs):
        vecs = [f[I] for f, c in zip(rec.loads_in, rec.cases_in) if c == k]
        parts.append(" ".join(_fmt_vec(v) for v in vecs) if vecs else "N/A")
    return "; ".join(parts)


HEADER = ("iter", "V", "compl", "compl0", "f_s")


def report_rows(report: RobustReport) -> list[tuple[str, ...]]:
    return [
        (str(r.iter), fmt(r.V), fmt(r.compl), fmt(r.compl0), load_column(report, r))
        for r in report.records
    ]


def render_report(report: RobustReport, format: str = "text") -> bytes:
    rows = report_rows(report)
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        w.writerows(rows)
        return buf.getvalue().encode("utf-8")
    if format != "text":
        raise ValueError(f"unknown report format {format!r}")
    table = [HEADER] + rows
    widths = [max(len(r[c]) for r in table) for c in range(len(HEADER))]
    lines = ["  ".join(cell.rjust(w) if c < 4 else cell for c, (cell, w) in enumerate(zip(row, widths))).rstrip() for row in table]
    lines.insert(1, "-" * len(lines[0]))
    lines.append(f"status: {report.status}")
    return ("\n".join(lines) + "\n").encode("utf-8")


# ---------------------------------------------------------------- drawings


def _design_csv(x) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("element", "x"))
    for i, v in enumerate(np.asarray(x, float)):
        w.writerow((i, repr(float(v))))
    return buf.getvalue().encode("utf-8")


def render_design(
    model: StructuralModel,
    x,
    loads=(),
    worst_loads=(),
    size: float = 600.0,
) -> tuple[bytes, bytes]:
    """SVG drawing of a design plus a CSV of ``element,x``.

    Bars are drawn with width proportional to ``x`` (elements below
    ``1e-3 * max(x)`` are left out); sheet elements are filled with a gray
    level proportional to thickness.  Nominal loads are drawn as black
    arrows, worst-case loads as red ones.
    """
    x = np.asarray(x, float)
    if x.shape != (model.m,):
        raise ValueError(f"design has shape {x.shape}, model has {model.m} elements")
    xy = np.asarray(model.coords, float)
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    extent = float(max(hi - lo)) or 1.0
    pad = 0.2 * extent
    s = size / (extent + 2 * pad)
    W = (hi[0] - lo[0] + 2 * pad) * s
    H = (hi[1] - lo[1] + 2 * pad) * s

    def P(p):
        return (p[0] - lo[0] + pad) * s, (hi[1] - p[1] + pad) * s

    svg = ET.Element(
        "svg",
        {"xmlns": "http://www.w3.org/2000/svg", "version": "1.1", "width": f"{W:.1f}", "height": f"{H:.1f}",
         "viewBox": f"0 0 {W:.1f} {H:.1f}"},
    )
    defs = ET.SubElement(svg, "defs")
    for name, color in (("nominal", "black"), ("worst", "red")):
        mk = ET.SubElement(defs, "marker", {"id": f"head-{name}", "markerWidth": "8", "markerHeight": "8",
                                             "refX": "7", "refY": "4", "orient": "auto"})
        ET.SubElement(mk, "path", {"d": "M0,0 L8,4 L0,8 z", "fill": color})
    xmax = float(x.max()) if x.size and x.max() > 0 else 1.0
    g = ET.SubElement(svg, "g", {"id": "design"})
    if model.kind == "sheet":
        for i, nodes in enumerate(model.connectivity):
            level = int(round(255 * (1.0 - max(x[i], 0.0) / xmax)))
            pts = " ".join("{:.2f},{:.2f}".format(*P(xy[n])) for n in nodes)
            ET.SubElement(g, "polygon", {"points": pts, "fill": f"rgb({level},{level},{level})",
                                         "data-element": str(i)})
    else:
        wmax = 0.05 * extent * s
        for i, (a, b) in enumerate(model.connectivity):
            if x[i] < OMIT_RATIO * xmax:
                continue
            (x1, y1), (x2, y2) = P(xy[a]), P(xy[b])
            ET.SubElement(g, "line", {"x1": f"{x1:.2f}", "y1": f"{y1:.2f}", "x2": f"{x2:.2f}", "y2": f"{y2:.2f}",
                                      "stroke": "black", "stroke-width": f"{wmax * x[i] / xmax:.4f}",
                                      "stroke-linecap": "round", "data-element": str(i)})
        sup = ET.SubElement(svg, "g", {"id": "supports"})
        for nid in np.nonzero(np.any(model.dof_map == FIXED, axis=1))[0]:
            cx, cy = P(xy[nid])
            ET.SubElement(sup, "circle", {"cx": f"{cx:.2f}", "cy": f"{cy:.2f}", "r": "3", "fill": "gray"})

    all_loads = [("nominal", "black", f) for f in loads] + [("worst", "red", f) for f in worst_loads]
    fmax = max((np.abs(f).max() for _, _, f in all_loads), default=0.0)
    arrows = ET.SubElement(svg, "g", {"id": "loads"})
    for name, color, f in all_loads:
        f = np.asarray(f, float)
        for nid in range(model.n_nodes):
            comp = np.array([f[d] if d != FIXED else 0.0 for d in model.dof_map[nid]])
            if not comp.any():
                continue
            tail = P(xy[nid])
            vec = 0.25 * extent * comp / fmax
            head = P(xy[nid] + vec)
            ET.SubElement(arrows, "line", {"x1": f"{tail[0]:.2f}", "y1": f"{tail[1]:.2f}", "x2": f"{head[0]:.2f}",
                                           "y2": f"{head[1]:.2f}", "stroke": color, "stroke-width": "1.5",
                                           "marker-end": f"url(#head-{name})", "class": name})
    body = ET.tostring(svg, encoding="unicode")
    return ('<?xml version="1.0" encoding="UTF-8"?>\n' + body + "\n").encode("utf-8"), _design_csv(x)
