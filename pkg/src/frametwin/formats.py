"""JSON file formats for curve sets, twins and run manifests.

All reals are written with 17 significant digits so 64-bit values survive a
write/read cycle unchanged.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidArgument
from .geometry import BezierCurve, as_tensor
from .wireframe import DigitalTwin, WireframeGraph


def real(x) -> float:
    return float(f"{float(x):.17g}")


def reals(xs) -> list[float]:
    if isinstance(xs, torch.Tensor):
        xs = xs.detach().reshape(-1).tolist()
    return [real(v) for v in np.asarray(xs, dtype=np.float64).reshape(-1)]


def dump_json(data, path: str | Path) -> None:
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


def read_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"{path}: invalid JSON ({exc})") from exc


def curves_to_dict(graph: WireframeGraph, curves: dict[int, BezierCurve], tau: dict | None = None, alpha: dict | None = None, vertices: dict | None = None) -> dict:
    """Edge-id keyed curve set, e.g. the printed edges of a twin or of a ground truth."""
    edges = []
    for k in sorted(curves):
        item = {"id": int(k), "v": list(graph.edges[k].v), "ctrl": [reals(q) for q in curves[k].ctrl]}
        if tau is not None:
            item["tau"] = reals(tau[k])
        if alpha is not None:
            item["alpha"] = reals(alpha[k])
        edges.append(item)
    verts = vertices if vertices is not None else {v: graph.vertices[v] for e in edges for v in e["v"]}
    return {
        "units": graph.units,
        "degree": graph.degree,
        "edges": edges,
        "vertices": [{"id": int(i), "pos": reals(p)} for i, p in sorted(verts.items())],
    }


def twin_to_dict(graph: WireframeGraph, twin: DigitalTwin, extra: dict | None = None) -> dict:
    out = curves_to_dict(graph, twin.deformed_edges, twin.tau, twin.alpha, twin.deformed_vertices)
    out.update(extra or {})
    return out


def curves_from_dict(data: dict) -> tuple[dict[int, BezierCurve], dict[int, tuple[int, int]], dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Returns curves, endpoint vertex ids, and (possibly empty) tau/alpha maps."""
    try:
        curves, ends, tau, alpha = {}, {}, {}, {}
        for item in data["edges"]:
            k = int(item["id"])
            curves[k] = BezierCurve(item["ctrl"])
            ends[k] = tuple(int(v) for v in item["v"])
            if "tau" in item:
                tau[k] = np.asarray(item["tau"], dtype=np.float64)
            if "alpha" in item:
                alpha[k] = np.asarray(item["alpha"], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise InvalidArgument(f"malformed curve JSON: {exc}") from exc
    return curves, ends, tau, alpha


def load_curves(path: str | Path):
    """Curves from either a wireframe model JSON or a curve/twin JSON."""
    data = read_json(path)
    if data.get("edges") and "id" not in data["edges"][0]:
        from .wireframe import graph_from_dict

        g = graph_from_dict(data)
        return {k: e.curve for k, e in enumerate(g.edges)}, {k: e.v for k, e in enumerate(g.edges)}, {}, {}
    return curves_from_dict(data)


def vertices_from_dict(data: dict) -> dict[int, torch.Tensor]:
    return {int(v["id"]): as_tensor(v["pos"]) for v in data.get("vertices", [])}
