"""Synthetic scenes: virtual cameras, analytic deformation oracles, metrics and the adaptive print loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import FrameTwinError, InvalidArgument
from .geometry import DTYPE, BezierCurve, as_tensor, eval_points, refit_ctrl
from .optimize import LossBreakdown, LossWeights, TwinConfig, TwinResult, construct_twin
from .splat import Camera, CurveSet, RenderOptions, render_views, write_pgm
from .wireframe import (
    DigitalTwin,
    PartialState,
    PrintPlan,
    WireframeGraph,
    blend_targets,
    graph_to_dict,
    partial_state,
    validate_plan,
)

log = logging.getLogger(__name__)

_AXES = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}


# --- cameras -----------------------------------------------------------------------------


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera transform with +z forward and image y pointing down."""
    eye, target, up = (np.asarray(v, float) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(fwd, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ eye
    return T


def make_cameras(n: int, bbox, width: int = 256, height: int = 256, elevation_deg: float = 30.0, azimuth0_deg: float = 0.0) -> list[Camera]:
    """``n`` cameras evenly spaced in azimuth on a circle of radius twice the bbox diagonal."""
    if n < 1:
        raise InvalidArgument("need at least one camera")
    lo, hi = (np.asarray(v, float) for v in bbox)
    diag = float(np.linalg.norm(hi - lo))
    if not diag > 0 or not np.isfinite(diag):
        raise InvalidArgument("degenerate bounding box")
    center = 0.5 * (lo + hi)
    radius = 2.0 * diag
    el = math.radians(elevation_deg)
    # the diagonal seen from 2*diag away spans ~0.7 of the image height
    f = 0.7 * height * radius / diag
    cams = []
    for i in range(n):
        az = math.radians(azimuth0_deg) + 2.0 * math.pi * i / n
        eye = center + radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera(width, height, f, f, (width - 1) / 2.0, (height - 1) / 2.0, look_at(eye, center)))
    return cams


# --- deformation oracles ------------------------------------------------------------------


@dataclass(frozen=True)
class DeformOracle:
    """Analytic displacement field used as simulated physical deformation.

    kinds: ``none``; ``translate`` (``vector``); ``sag`` (``a``, ``base``):
    ``(0, 0, -a (z - base)^2)`` above ``base``; ``tip_bend`` (``axis``, ``a``,
    ``base``): ``a (z - base)^2`` along ``axis``; ``affine`` (``matrix``,
    ``vector``).  An optional ``falloff = (cx, cy, r)`` multiplies the field by
    ``exp(-|xy - c|^2 / (2 r^2))`` to confine it to one region.
    """

    kind: str = "none"
    vector: tuple[float, float, float] = (0.0, 0.0, 0.0)
    a: float = 0.0
    base: float = 0.0
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    matrix: tuple[tuple[float, ...], ...] = ((0.0, 0.0, 0.0),) * 3
    falloff: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("none", "translate", "sag", "tip_bend", "affine"):
            raise InvalidArgument(f"unknown oracle kind {self.kind!r}")

    def __call__(self, x) -> torch.Tensor:
        x = as_tensor(x)
        z = x[..., 2:3]
        if self.kind == "none":
            d = torch.zeros_like(x)
        elif self.kind == "translate":
            d = torch.zeros_like(x) + torch.tensor(self.vector, dtype=DTYPE)
        elif self.kind == "sag":
            h = torch.clamp(z - self.base, min=0.0)
            d = torch.cat([torch.zeros_like(h), torch.zeros_like(h), -self.a * h * h], dim=-1)
        elif self.kind == "tip_bend":
            h = torch.clamp(z - self.base, min=0.0)
            d = self.a * h * h * torch.tensor(self.axis, dtype=DTYPE)
        else:
            d = x @ torch.tensor(self.matrix, dtype=DTYPE).T + torch.tensor(self.vector, dtype=DTYPE)
        if self.falloff is not None and self.kind != "none":
            cx, cy, r = self.falloff
            r2 = (x[..., 0:1] - cx) ** 2 + (x[..., 1:2] - cy) ** 2
            d = d * torch.exp(-r2 / (2.0 * r * r))
        return d

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "translate":
            out["vector"] = list(self.vector)
        elif self.kind == "sag":
            out.update(a=self.a, base=self.base)
        elif self.kind == "tip_bend":
            out.update(axis=list(self.axis), a=self.a, base=self.base)
        elif self.kind == "affine":
            out.update(matrix=[list(r) for r in self.matrix], vector=list(self.vector))
        if self.falloff is not None:
            out["falloff"] = list(self.falloff)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DeformOracle":
        kw = dict(d)
        for key in ("vector", "axis", "falloff"):
            if key in kw and kw[key] is not None:
                kw[key] = tuple(float(v) for v in kw[key])
        if "matrix" in kw:
            kw["matrix"] = tuple(tuple(float(v) for v in row) for row in kw["matrix"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise InvalidArgument(f"bad oracle description {d}: {exc}") from exc


def parse_oracle(text: str) -> DeformOracle:
    """Parse ``none``, ``translate:X,Y,Z``, ``sag:A[:BASE]``, ``tip_bend:AXIS:A[:BASE]``
    or ``affine:A11,..,A33,T1,T2,T3``, optionally followed by ``@CX,CY,R``."""
    try:
        body, _, region = text.partition("@")
        falloff = tuple(float(v) for v in region.split(",")) if region else None
        if falloff is not None and len(falloff) != 3:
            raise ValueError("falloff needs cx,cy,r")
        kind, *args = body.split(":")
        if kind == "none":
            return DeformOracle()
        if kind == "translate":
            v = tuple(float(c) for c in args[0].split(","))
            if len(v) != 3:
                raise ValueError("translate needs 3 components")
            return DeformOracle("translate", vector=v, falloff=falloff)
        if kind == "sag":
            return DeformOracle("sag", a=float(args[0]), base=float(args[1]) if len(args) > 1 else 0.0, falloff=falloff)
        if kind == "tip_bend":
            axis = _AXES.get(args[0]) or tuple(float(c) for c in args[0].split(","))
            return DeformOracle("tip_bend", axis=axis, a=float(args[1]), base=float(args[2]) if len(args) > 2 else 0.0, falloff=falloff)
        if kind == "affine":
            vals = [float(c) for c in args[0].split(",")]
            if len(vals) != 12:
                raise ValueError("affine needs 12 numbers")
            return DeformOracle("affine", matrix=(tuple(vals[0:3]), tuple(vals[3:6]), tuple(vals[6:9])), vector=tuple(vals[9:12]), falloff=falloff)
    except (IndexError, ValueError) as exc:
        raise InvalidArgument(f"cannot parse deformation {text!r}: {exc}") from exc
    raise InvalidArgument(f"unknown deformation kind in {text!r}")


def apply_oracle(graph: WireframeGraph, partial: PartialState, oracle: DeformOracle, m: int = 64) -> WireframeGraph:
    """Ground-truth geometry: printed edges and vertices moved by the oracle, the rest untouched."""
    if oracle.kind == "none" or not partial:
        return graph
    params = torch.arange(m + 1, dtype=DTYPE) / m
    curves: dict[int, BezierCurve] = {}
    with torch.no_grad():
        for k in partial.sorted_edges():
            ctrl = graph.edges[k].curve.ctrl
            p = eval_points(ctrl, params)
            D = oracle(p)
            new = ctrl + refit_ctrl(params, D, graph.edges[k].curve.degree)
            new[0], new[-1] = p[0] + D[0], p[-1] + D[-1]
            curves[k] = BezierCurve(new)
        verts = {v: graph.vertices[v] + oracle(graph.vertices[v]) for v in partial.printed_vertices}
    return graph.with_curves(curves, verts)


# --- scenes ------------------------------------------------------------------------------------


@dataclass
class SceneBundle:
    graph: WireframeGraph
    plan: PrintPlan
    t: int
    partial: PartialState
    cameras: list[Camera]
    images: list[torch.Tensor]
    gt_graph: WireframeGraph
    seed: int
    oracle: DeformOracle = DeformOracle()
    missing_edges: tuple[int, ...] = ()


def render_graph(graph: WireframeGraph, edge_ids: Sequence[int], cameras: Sequence[Camera], tau: float, K: int = 32, m: int = 64, opts: RenderOptions = RenderOptions(), alpha: float = 1.0) -> list[torch.Tensor]:
    """Render edges of ``graph`` exactly as an identity-deformed twin would be rendered."""
    edge_ids = list(edge_ids)
    if not edge_ids:
        return [torch.zeros(c.height, c.width, dtype=DTYPE) for c in cameras]
    curves = CurveSet.from_graph(graph, edge_ids)
    E = len(edge_ids)
    with torch.no_grad():
        return render_views(curves, torch.full((E, K), float(tau), dtype=DTYPE), torch.full((E, K), float(alpha), dtype=DTYPE), None, cameras, K, m, opts)


def add_noise(images: Sequence[torch.Tensor], seed: int, amplitude: float = 1.0 / 255.0) -> list[torch.Tensor]:
    rng = np.random.default_rng(seed)
    out = []
    for img in images:
        noise = torch.as_tensor(rng.uniform(-amplitude, amplitude, size=tuple(img.shape)))
        out.append(torch.clamp(img + noise, 0.0, 1.0))
    return out


def generate_scene(
    graph: WireframeGraph,
    plan: PrintPlan,
    t: int,
    oracle: DeformOracle = DeformOracle(),
    n_views: int = 8,
    resolution: int = 256,
    seed: int = 0,
    noise: bool = False,
    missing_edges: Sequence[int] = (),
    tau: float = 0.3,
    K: int = 32,
    m: int = 64,
    opts: RenderOptions = RenderOptions(),
    cameras: Sequence[Camera] | None = None,
) -> SceneBundle:
    """Deform the printed part by ``oracle`` and render it from ``n_views`` cameras.

    ``missing_edges`` are printed edges left out of the target images (a strut
    that failed to extrude).
    """
    report = validate_plan(plan, graph)
    report.raise_if_invalid()
    if t < 1:
        raise InvalidArgument("scene needs t >= 1")
    partial = partial_state(graph, plan, t)
    gt = apply_oracle(graph, partial, oracle, m)
    cams = list(cameras) if cameras is not None else make_cameras(n_views, graph.bbox(), resolution, resolution)
    visible = [k for k in partial.sorted_edges() if k not in set(missing_edges)]
    images = render_graph(gt, visible, cams, tau, K, m, opts)
    if noise:
        images = add_noise(images, seed)
    return SceneBundle(graph, plan, t, partial, cams, images, gt, seed, oracle, tuple(missing_edges))


# --- metrics ----------------------------------------------------------------------------------------


def curve_points(curves: Sequence[BezierCurve] | dict, m: int = 64) -> torch.Tensor:
    if isinstance(curves, dict):
        curves = [curves[k] for k in sorted(curves)]
    params = torch.arange(m + 1, dtype=DTYPE) / m
    if not curves:
        return torch.zeros(0, 3, dtype=DTYPE)
    return eval_points(torch.stack([c.ctrl for c in curves]).detach(), params).reshape(-1, 3)


def _nearest(a: torch.Tensor, b: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    out = torch.empty(a.shape[0], dtype=DTYPE)
    for i in range(0, a.shape[0], chunk):
        d2 = ((a[i : i + chunk, None, :] - b[None, :, :]) ** 2).sum(-1)
        out[i : i + chunk] = d2.min(dim=1).values.sqrt()
    return out


def chamfer(a, b) -> float:
    """Symmetric Chamfer distance: mean nearest distance a->b plus b->a."""
    A, B = as_tensor(a).reshape(-1, 3), as_tensor(b).reshape(-1, 3)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise InvalidArgument("Chamfer distance of an empty point set")
    return float(_nearest(A, B).mean() + _nearest(B, A).mean())


def chamfer_curves(a: dict, b: dict, m: int = 64) -> float:
    return chamfer(curve_points(a, m), curve_points(b, m))


def edge_displacements(twin: dict, planned: dict, m: int = 64) -> dict[int, float]:
    """Per-edge max ``|c*(u) - c(u)|`` over dense samples."""
    if set(twin) != set(planned):
        raise InvalidArgument(f"edge sets differ: {sorted(set(twin) ^ set(planned))}")
    params = torch.arange(m + 1, dtype=DTYPE) / m
    out = {}
    for k in sorted(twin):
        d = eval_points(twin[k].ctrl.detach(), params) - eval_points(planned[k].ctrl.detach(), params)
        out[k] = float(d.norm(dim=-1).max())
    return out


def max_displacement(twin: dict, planned: dict, m: int = 64) -> float:
    """E_max: largest pointwise displacement between matching edges."""
    disp = edge_displacements(twin, planned, m)
    return max(disp.values()) if disp else 0.0


def printed_curves(graph: WireframeGraph, edge_ids) -> dict[int, BezierCurve]:
    return {k: graph.edges[k].curve for k in edge_ids}


# --- adaptive printing loop ------------------------------------------------------------------------


@dataclass
class SimConfig:
    twin: TwinConfig = TwinConfig()
    weights: LossWeights = LossWeights()
    n_views: int = 8
    resolution: int = 256
    seed: int = 0
    noise: bool = False


@dataclass
class RoundRecord:
    t: int
    printed_edges: list[int]
    trace: list[LossBreakdown]
    converged: bool
    chamfer_twin: float
    chamfer_planned: float
    chamfer_reference: float
    e_max: float
    e_max_gt: float
    half_blended: list[int]
    deformed_vertices: dict[int, list[float]]
    working_plan: dict
    images: list[torch.Tensor] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "printed_edges": self.printed_edges,
            "converged": self.converged,
            "iterations": len(self.trace),
            "chamfer_twin": self.chamfer_twin,
            "chamfer_planned": self.chamfer_planned,
            "chamfer_reference": self.chamfer_reference,
            "e_max": self.e_max,
            "e_max_gt": self.e_max_gt,
            "half_blended": self.half_blended,
            "deformed_vertices": {str(k): v for k, v in self.deformed_vertices.items()},
            "trace": [[r.iteration, r.l_img, r.l_bend, r.l_total, r.lr] for r in self.trace],
            "working_plan": self.working_plan,
        }


@dataclass
class RunReport:
    rounds: list[RoundRecord] = field(default_factory=list)
    batches: int = 0
    aborted: bool = False
    error: str | None = None
    final_plan: WireframeGraph | None = None

    @property
    def complete(self) -> bool:
        return not self.aborted and len(self.rounds) == self.batches

    def to_dict(self) -> dict:
        return {
            "batches": self.batches,
            "aborted": self.aborted,
            "error": self.error,
            "rounds": [r.to_dict() for r in self.rounds],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=True) + "\n"


def _fmt_vec(v) -> list[float]:
    return [float(f"{float(c):.17g}") for c in as_tensor(v).tolist()]


def adaptive_sim(graph: WireframeGraph, plan: PrintPlan, oracles: Sequence[DeformOracle], cfg: SimConfig = SimConfig(), run_dir: str | Path | None = None) -> RunReport:
    """Simulate print -> observe -> twin -> blend for every batch of ``plan``.

    The simulated printer follows the working plan; each round's oracle then
    deforms everything printed so far.  The twin of round ``t`` starts from
    the previous twin (printed edges) and the working plan (new edges).
    """
    validate_plan(plan, graph).raise_if_invalid()
    if len(oracles) != len(plan.batches):
        raise InvalidArgument(f"{len(oracles)} oracles for {len(plan.batches)} batches")
    cams = make_cameras(cfg.n_views, graph.bbox(), cfg.resolution, cfg.resolution)
    tw = cfg.twin
    working = graph.with_curves({})
    physical = graph.with_curves({})
    printed_v: set[int] = set()
    report = RunReport(batches=len(plan.batches))
    for t, oracle in enumerate(oracles, start=1):
        partial = partial_state(graph, plan, t)
        new_edges = plan.batches[t - 1]
        new_verts = {v for k in new_edges for v in graph.edges[k].v} - printed_v
        physical = physical.with_curves({k: working.edges[k].curve for k in new_edges}, {v: working.vertices[v] for v in new_verts})
        printed_v |= new_verts
        physical = apply_oracle(physical, partial, oracle, tw.m)
        images = render_graph(physical, partial.sorted_edges(), cams, tw.tau_init, tw.K, tw.m, tw.render)
        if cfg.noise:
            images = add_noise(images, cfg.seed * 1000 + t)
        try:
            result: TwinResult = construct_twin(working, partial, cams, images, replace(tw, seed=tw.seed + t - 1), cfg.weights)
        except FrameTwinError as exc:
            report.aborted = True
            report.error = f"round {t}: {exc}"
            log.error("adaptive simulation aborted: %s", report.error)
            break
        twin = result.twin
        blended = blend_targets(result.field, twin, partial, working, tw.m)
        half = [k for k in blended if len(set(working.edges[k].v) & partial.printed_vertices) == 1]
        ids = partial.sorted_edges()
        gt = printed_curves(physical, ids)
        planned = printed_curves(graph, ids)
        reference = printed_curves(working, ids)
        working = working.with_curves({**twin.deformed_edges, **blended}, twin.deformed_vertices)
        rec = RoundRecord(
            t=t,
            printed_edges=ids,
            trace=result.trace,
            converged=result.converged,
            chamfer_twin=chamfer_curves(twin.deformed_edges, gt),
            chamfer_planned=chamfer_curves(planned, gt),
            chamfer_reference=chamfer_curves(reference, gt),
            e_max=max_displacement(twin.deformed_edges, planned),
            e_max_gt=max_displacement(gt, planned),
            half_blended=sorted(half),
            deformed_vertices={v: _fmt_vec(p) for v, p in twin.deformed_vertices.items()},
            working_plan=graph_to_dict(working),
            images=images,
        )
        report.rounds.append(rec)
        log.info("round %d: chamfer twin %.4g planned %.4g, E_max %.4g", t, rec.chamfer_twin, rec.chamfer_planned, rec.e_max)
        if run_dir is not None:
            rd = Path(run_dir) / f"round_{t}"
            rd.mkdir(parents=True, exist_ok=True)
            for i, img in enumerate(images):
                write_pgm(rd / f"view_{i}.pgm", img)
    report.final_plan = working
    return report
