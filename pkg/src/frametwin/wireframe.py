"""Wireframe graphs, print plans, partial print states and target blending."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .errors import InvalidArgument, UndefinedDistanceError
from .geometry import DTYPE, BezierCurve, as_tensor, eval_points, refit_ctrl

log = logging.getLogger(__name__)

#: Vertex/endpoint coincidence tolerance (mm).
COINCIDENCE_TOL = 1e-9
#: Samples per edge for distance queries.
DIST_SAMPLES = 64


@dataclass(frozen=True)
class Edge:
    v: tuple[int, int]
    curve: BezierCurve


@dataclass
class WireframeGraph:
    vertices: torch.Tensor  # (V, 3)
    edges: list[Edge]
    units: str = "mm"

    def __post_init__(self):
        self.vertices = as_tensor(self.vertices).reshape(-1, 3)

    @property
    def degree(self) -> int:
        return self.edges[0].curve.degree if self.edges else 3

    def ctrl_stack(self, edge_ids: Iterable[int]) -> torch.Tensor:
        return torch.stack([self.edges[k].curve.ctrl for k in edge_ids])

    def bbox(self, edge_ids: Iterable[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounds of vertices and control polygons."""
        ids = range(len(self.edges)) if edge_ids is None else edge_ids
        pts = [self.vertices] + [self.edges[k].curve.ctrl for k in ids]
        allp = torch.cat(pts).detach().numpy()
        return allp.min(axis=0), allp.max(axis=0)

    def with_curves(self, curves: Mapping[int, BezierCurve], vertices: Mapping[int, object] | None = None) -> "WireframeGraph":
        """Copy with some edge curves and vertex positions replaced."""
        verts = self.vertices.clone()
        for i, p in (vertices or {}).items():
            verts[i] = as_tensor(p)
        edges = [Edge(e.v, curves.get(k, e.curve)) for k, e in enumerate(self.edges)]
        return WireframeGraph(verts, edges, self.units)


@dataclass
class PrintPlan:
    batches: list[list[int]]
    base_vertices: list[int] | None = None

    def __len__(self) -> int:
        return len(self.batches)


@dataclass(frozen=True)
class PartialState:
    printed_edges: frozenset[int]
    printed_vertices: frozenset[int]

    def __bool__(self) -> bool:
        return bool(self.printed_edges)

    def sorted_edges(self) -> list[int]:
        return sorted(self.printed_edges)


@dataclass
class DigitalTwin:
    deformed_edges: dict[int, BezierCurve]
    deformed_vertices: dict[int, torch.Tensor]
    tau: dict[int, np.ndarray] = field(default_factory=dict)
    alpha: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_if_invalid(self) -> None:
        if self.violations:
            raise InvalidArgument("invalid wireframe: " + "; ".join(self.violations))


def validate_graph(graph: WireframeGraph) -> ValidationReport:
    report = ValidationReport()
    V = graph.vertices.shape[0]
    if not torch.isfinite(graph.vertices).all():
        report.violations.append("non-finite vertex coordinates")
    if not graph.edges:
        report.warnings.append("nothing to print")
    for k, e in enumerate(graph.edges):
        s, t = e.v
        if not (0 <= s < V and 0 <= t < V):
            report.violations.append(f"edge {k}: vertex index out of range {e.v}")
            continue
        if s == t:
            report.violations.append(f"edge {k}: zero-length edge (both ends at vertex {s})")
            continue
        ctrl = e.curve.ctrl
        for end, vi in ((ctrl[0], s), (ctrl[-1], t)):
            gap = float((end - graph.vertices[vi]).norm())
            if gap > COINCIDENCE_TOL:
                report.violations.append(f"edge {k}: endpoint mismatch with vertex {vi} ({gap:.3g} mm)")
        if float((graph.vertices[s] - graph.vertices[t]).norm()) <= COINCIDENCE_TOL:
            report.violations.append(f"edge {k}: zero-length edge")
        if e.curve.degree != graph.degree:
            report.violations.append(f"edge {k}: degree {e.curve.degree} differs from model degree {graph.degree}")
    return report


def edge_vertices(graph: WireframeGraph, edge_ids: Iterable[int]) -> frozenset[int]:
    out: set[int] = set()
    for k in edge_ids:
        out.update(graph.edges[k].v)
    return frozenset(out)


def default_base_vertices(graph: WireframeGraph, tol: float = 1e-6) -> list[int]:
    z = graph.vertices[:, 2]
    return [int(i) for i in torch.nonzero(z <= z.min() + tol).flatten()]


def validate_plan(plan: PrintPlan, graph: WireframeGraph) -> ValidationReport:
    report = ValidationReport()
    seen: set[int] = set()
    base = set(plan.base_vertices if plan.base_vertices is not None else default_base_vertices(graph))
    covered: set[int] = set()
    for t, batch in enumerate(plan.batches, start=1):
        if not batch:
            report.violations.append(f"batch {t} is empty")
        for k in batch:
            if not 0 <= k < len(graph.edges):
                report.violations.append(f"batch {t}: edge {k} out of range")
            elif k in seen:
                report.violations.append(f"batch {t}: edge {k} repeated")
            seen.add(k)
        valid = [k for k in batch if 0 <= k < len(graph.edges)]
        touched = edge_vertices(graph, valid)
        if t == 1:
            if valid and not touched & base:
                report.violations.append("batch 1 does not touch a base vertex")
        elif valid and not touched & covered:
            report.violations.append(f"batch {t} is not connected to earlier batches")
        covered |= touched
    return report


def partial_state(graph: WireframeGraph, plan: PrintPlan, t: int) -> PartialState:
    """Edges printed after batches ``1..t`` and their endpoint vertices."""
    if not 0 <= t <= len(plan.batches):
        raise InvalidArgument(f"t={t} outside 0..{len(plan.batches)}")
    edges = frozenset(k for batch in plan.batches[:t] for k in batch)
    return PartialState(edges, edge_vertices(graph, edges))


# --- distance to the printed structure -------------------------------------


def printed_samples(partial: PartialState, curves: Mapping[int, BezierCurve] | WireframeGraph, m: int = DIST_SAMPLES) -> torch.Tensor:
    """Dense samples of the printed curves, ``(|E^t| * (m + 1), 3)``."""
    if not partial:
        raise UndefinedDistanceError("no printed edges: distance to the printed structure is undefined")
    if isinstance(curves, WireframeGraph):
        curves = {k: e.curve for k, e in enumerate(curves.edges)}
    params = torch.arange(m + 1, dtype=DTYPE) / m
    ctrl = torch.stack([curves[k].ctrl for k in partial.sorted_edges()]).detach()
    return eval_points(ctrl, params).reshape(-1, 3)


def min_dist_to_points(x, samples: torch.Tensor, chunk: int = 8192) -> torch.Tensor:
    X = as_tensor(x).reshape(-1, 3).detach()
    out = torch.empty(X.shape[0], dtype=DTYPE)
    for i in range(0, X.shape[0], chunk):
        d2 = ((X[i : i + chunk, None, :] - samples[None, :, :]) ** 2).sum(-1)
        out[i : i + chunk] = d2.min(dim=1).values.sqrt()
    return out


def min_dist_to_printed(x, partial: PartialState, curves) -> float | torch.Tensor:
    """Distance from ``x`` (one point or ``(N, 3)``) to the sampled printed curves."""
    d = min_dist_to_points(x, printed_samples(partial, curves))
    return float(d[0]) if as_tensor(x).ndim == 1 else d


# --- blending of unprinted struts -------------------------------------------


def blend_targets(
    field_fn: Callable[[torch.Tensor], torch.Tensor],
    twin: DigitalTwin,
    partial: PartialState,
    graph: WireframeGraph,
    m: int = 64,
) -> dict[int, BezierCurve]:
    """Graft unprinted struts onto the deformed printed structure.

    ``graph`` holds the current working geometry; ``field_fn`` maps points to
    displacements.  Edges with both ends printed are mapped through
    ``p + d(p)``; edges with one printed end are blended by ``p + u d(p)``
    with ``u = 1`` at the printed end; the rest are returned unchanged.
    Printed-side endpoints are pinned to the twin's deformed vertices and
    free endpoints to the working vertices, so the interface is C0 exactly.
    """
    params = torch.arange(m + 1, dtype=DTYPE) / m
    pv = partial.printed_vertices
    out: dict[int, BezierCurve] = {}
    with torch.no_grad():
        for k, e in enumerate(graph.edges):
            if k in partial.printed_edges:
                continue
            s, t = e.v
            s_in, t_in = s in pv, t in pv
            if not (s_in or t_in):
                out[k] = e.curve
                continue
            ctrl = e.curve.ctrl
            if s_in and not t_in:
                ctrl = ctrl.flip(0)  # printed end at u = 1
            p = eval_points(ctrl, params)
            d = field_fn(p)
            if s_in and t_in:
                moved = p + d
                first, last = twin.deformed_vertices[s], twin.deformed_vertices[t]
            else:
                moved = p + params[:, None] * d
                free, fixed = (t, s) if s_in else (s, t)
                first, last = graph.vertices[free], twin.deformed_vertices[fixed]
            first, last = as_tensor(first)[None], as_tensor(last)[None]
            moved = torch.cat([first, moved[1:-1], last])
            # refit is linear and reproduces ctrl from its own samples, so a zero field is a no-op
            new = ctrl + refit_ctrl(params, moved - p, e.curve.degree)
            new = torch.cat([first, new[1:-1], last])
            if s_in and not t_in:
                new = new.flip(0)
            out[k] = BezierCurve(new)
    return out


# --- JSON format ----------------------------------------------------------------


def _fmt(x: float) -> float:
    return float(f"{float(x):.17g}")


def graph_to_dict(graph: WireframeGraph) -> dict:
    return {
        "units": graph.units,
        "degree": graph.degree,
        "vertices": [[_fmt(c) for c in v] for v in graph.vertices.tolist()],
        "edges": [{"v": list(e.v), "ctrl": [[_fmt(c) for c in q] for q in e.curve.ctrl.tolist()]} for e in graph.edges],
    }


def graph_from_dict(data: dict) -> WireframeGraph:
    try:
        degree = int(data.get("degree", 3))
        verts = as_tensor(data["vertices"]).reshape(-1, 3)
        edges = []
        for item in data["edges"]:
            s, t = (int(i) for i in item["v"])
            if "ctrl" in item:
                curve = BezierCurve(item["ctrl"])
            else:
                if not (0 <= s < len(verts) and 0 <= t < len(verts)):
                    raise InvalidArgument(f"edge {item['v']} references a missing vertex")
                curve = BezierCurve.straight(verts[s], verts[t], degree)
            edges.append(Edge((s, t), curve))
    except (KeyError, TypeError) as exc:
        raise InvalidArgument(f"malformed wireframe JSON: {exc}") from exc
    return WireframeGraph(verts, edges, data.get("units", "mm"))


def load_graph(path: str | Path) -> WireframeGraph:
    graph = graph_from_dict(json.loads(Path(path).read_text()))
    validate_graph(graph).raise_if_invalid()
    return graph


def save_graph(graph: WireframeGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(graph), indent=1) + "\n")


def plan_to_dict(plan: PrintPlan) -> dict:
    out: dict = {"batches": [list(map(int, b)) for b in plan.batches]}
    if plan.base_vertices is not None:
        out["base_vertices"] = list(plan.base_vertices)
    return out


def plan_from_dict(data: dict) -> PrintPlan:
    try:
        return PrintPlan([[int(k) for k in b] for b in data["batches"]], data.get("base_vertices"))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidArgument(f"malformed plan JSON: {exc}") from exc


def cube_graph(size: float = 10.0, degree: int = 3, origin=(0.0, 0.0, 0.0)) -> WireframeGraph:
    """Cube wireframe with 8 vertices and 12 straight edges, base face at z = origin z."""
    o = np.asarray(origin, dtype=np.float64)
    corners = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=np.float64) * size + o
    pairs = [(0, 1), (2, 3), (0, 2), (1, 3),  # bottom
             (0, 4), (1, 5), (2, 6), (3, 7),  # vertical
             (4, 5), (6, 7), (4, 6), (5, 7)]  # top
    verts = as_tensor(corners)
    edges = [Edge(p, BezierCurve.straight(verts[p[0]], verts[p[1]], degree)) for p in pairs]
    return WireframeGraph(verts, edges)
