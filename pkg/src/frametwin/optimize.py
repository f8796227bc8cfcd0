"""Losses, Adam with a decaying learning rate, and the digital-twin construction loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import InvalidArgument, NumericError, UndefinedDistanceError
from .field import DeformationField, Domain, EncodingConfig, GradientAccumulator, grad_of_scalar
from .geometry import DTYPE, BezierCurve, as_tensor
from .splat import Camera, CurveSet, RenderOptions, build_kernels, deform_curves, render_kernels
from .wireframe import DigitalTwin, PartialState, WireframeGraph, min_dist_to_points, printed_samples

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    w_bend: float = 1e-7
    p_exponent: float = 2.0
    fd_step: float | None = None  # mm; None -> 1% of the model bbox diagonal
    bend_samples: int = 4096

    def __post_init__(self):
        if self.w_bend < 0 or self.p_exponent < 0:
            raise InvalidArgument("w_bend and p_exponent must be non-negative")
        if self.fd_step is not None and not self.fd_step > 0:
            raise InvalidArgument("fd_step must be positive")
        if self.bend_samples < 1:
            raise InvalidArgument("bend_samples must be >= 1")


@dataclass
class LossBreakdown:
    iteration: int
    l_img: float
    l_bend: float
    l_total: float
    lr: float


@dataclass(frozen=True)
class TwinConfig:
    max_iters: int = 300
    window: int = 20
    rel_tol: float = 1e-4
    seed: int = 0
    K: int = 32
    m: int = 64
    enlarge: float = 1.1
    tau_init: float = 0.3  # mm, nominal strut radius
    alpha_init: float = 1.0
    lr0: float = 1.6e-4
    lr_min: float = 1.6e-5
    decay: float = 0.99
    lr_tau: float = 5e-3
    lr_alpha: float = 2e-2
    optimize_tau: bool = True
    optimize_alpha: bool = True
    num_bands: int = 15
    hidden: int = 256
    depth: int = 8
    bend_when_unweighted: bool = True  # still report L_bend when w_bend == 0
    render: RenderOptions = RenderOptions()

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidArgument("max_iters must be >= 1")
        if self.K < 1 or self.m < 1 or self.window < 1:
            raise InvalidArgument("K, m and window must be positive")


# --- losses ------------------------------------------------------------------------------


def loss_img(rendered: Sequence[torch.Tensor], captured: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum of absolute pixel residuals over all views."""
    if len(rendered) != len(captured):
        raise InvalidArgument(f"{len(rendered)} rendered views vs {len(captured)} captured")
    total = torch.zeros((), dtype=DTYPE)
    for i, (r, c) in enumerate(zip(rendered, captured)):
        c = as_tensor(c)
        if r.shape != c.shape:
            raise InvalidArgument(f"view {i}: rendered {tuple(r.shape)} vs captured {tuple(c.shape)}")
        total = total + (r - c).abs().sum()
    return total


def gamma_from_distance(dist, p: float):
    """``dist ** p`` with the uniform-weight convention ``p = 0 -> 1``."""
    if p == 0:
        return torch.ones_like(as_tensor(dist)) if isinstance(dist, torch.Tensor) else 1.0
    return dist**p


def gamma(x, partial: PartialState, curves, p: float):
    """Adaptive bending weight at ``x``: distance to the printed curves raised to ``p``."""
    if not partial:
        raise UndefinedDistanceError("gamma needs at least one printed edge")
    d = min_dist_to_points(x, printed_samples(partial, curves))
    g = gamma_from_distance(d, p)
    return float(g[0]) if as_tensor(x).ndim == 1 else g


def bend_points(domain: Domain, n: int, seed: int, iteration: int) -> torch.Tensor:
    """Uniform points in the domain from a counter-based stream keyed by (seed, iteration)."""
    rng = np.random.Generator(np.random.Philox(key=(int(seed) & (2**64 - 1)) | (int(iteration) << 64)))
    u = rng.random((n, 3))
    lo, ext = np.asarray(domain.lo), domain.extent
    return torch.as_tensor(lo + u * ext)


def fd_laplacian(field_fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float) -> torch.Tensor:
    """Component-wise vector Laplacian by the 7-point central stencil, ``(N, 3)``."""
    N = x.shape[0]
    offsets = torch.zeros(7, 3, dtype=DTYPE)
    for c in range(3):
        offsets[1 + 2 * c, c] = h
        offsets[2 + 2 * c, c] = -h
    pts = (x[None, :, :] + offsets[:, None, :]).reshape(-1, 3)
    d = field_fn(pts).reshape(7, N, 3)
    return (d[1:].sum(0) - 6.0 * d[0]) / (h * h)


def default_fd_step(graph_bbox: tuple[np.ndarray, np.ndarray]) -> float:
    lo, hi = graph_bbox
    return 0.01 * float(np.linalg.norm(np.asarray(hi) - np.asarray(lo)))


def loss_bend(
    field_fn: Callable[[torch.Tensor], torch.Tensor],
    printed: torch.Tensor | None,
    weights: LossWeights,
    domain: Domain,
    h: float,
    seed: int = 0,
    iteration: int = 0,
) -> torch.Tensor:
    """Monte Carlo estimate of the gamma-weighted integral of ``|Lap d|^2`` over the domain.

    ``printed`` are dense samples of the printed curves (needed unless ``p = 0``).
    """
    if h > float(domain.extent.min()):
        raise InvalidArgument(f"finite-difference step {h} exceeds the domain extent {domain.extent.min()}")
    x = bend_points(domain, weights.bend_samples, seed, iteration)
    if weights.p_exponent == 0:
        g = torch.ones(x.shape[0], dtype=DTYPE)
    else:
        if printed is None or printed.numel() == 0:
            raise UndefinedDistanceError("adaptive bending weight needs printed samples")
        g = gamma_from_distance(min_dist_to_points(x, printed), weights.p_exponent)
    lap = fd_laplacian(field_fn, x, h)
    return domain.volume * (g * (lap**2).sum(-1)).mean()


def total_loss(l_img: float, l_bend: float, weights: LossWeights | float, iteration: int = 0, lr: float = 0.0) -> LossBreakdown:
    w = weights.w_bend if isinstance(weights, LossWeights) else float(weights)
    return LossBreakdown(iteration, float(l_img), float(l_bend), float(l_img) + w * float(l_bend), lr)


# --- Adam ------------------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr0: float = 1.6e-4
    lr_min: float = 1.6e-5
    decay: float = 0.99

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor], **kw) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], **kw)

    def lr(self, step: int | None = None) -> float:
        i = self.step if step is None else step
        return max(self.lr0 * self.decay**i, self.lr_min)


def adam_step(state: AdamState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], lr_scale: Sequence[float] | None = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    ``lr_scale`` multiplies the scheduled rate per parameter tensor (used for
    the thickness and opacity groups).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidArgument("parameter, gradient and moment counts differ")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise InvalidArgument(f"gradient {i} has shape {tuple(g.shape)}, parameter {tuple(params[i].shape)}")
        if not torch.isfinite(g).all():
            bad = int((~torch.isfinite(g)).sum())
            raise NumericError(f"non-finite gradient in tensor {i}", {"tensor": i, "non_finite": bad, "step": state.step})
    lr = state.lr()
    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            state.m[i].mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            state.v[i].mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            step = (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + state.eps)
            scale = lr if lr_scale is None else lr * lr_scale[i]
            p.sub_(scale * step)
    state.step = t
    return state


# --- twin construction --------------------------------------------------------------------------


@dataclass
class TwinResult:
    twin: DigitalTwin
    field: DeformationField
    trace: list[LossBreakdown]
    converged: bool
    edge_ids: list[int]
    tau: torch.Tensor
    alpha: torch.Tensor


def model_domain(graph: WireframeGraph, enlarge: float = 1.1) -> Domain:
    lo, hi = graph.bbox()
    return Domain.around(lo, hi, enlarge)


def _converged(trace: Sequence[LossBreakdown], window: int, tol: float) -> bool:
    if len(trace) <= window:
        return False
    now, then = trace[-1].l_total, trace[-1 - window].l_total
    if then == 0.0:
        return now == 0.0
    return abs(now - then) / abs(then) < tol


def construct_twin(
    graph: WireframeGraph,
    partial: PartialState,
    cameras: Sequence[Camera],
    images: Sequence[torch.Tensor],
    cfg: TwinConfig = TwinConfig(),
    weights: LossWeights = LossWeights(),
    domain: Domain | None = None,
    callback: Callable[[int, LossBreakdown], None] | None = None,
) -> TwinResult:
    """Fit the deformation field, thickness and opacity of the printed edges to the views.

    ``graph`` is the reference geometry the field deforms; ``domain`` defaults
    to its enlarged bounding box.
    """
    if len(cameras) != len(images):
        raise InvalidArgument(f"{len(cameras)} cameras but {len(images)} images")
    if not partial:
        raise UndefinedDistanceError("nothing printed: no twin to construct")
    for cam, img in zip(cameras, images):
        if tuple(as_tensor(img).shape) != (cam.height, cam.width):
            raise InvalidArgument("captured image size does not match its camera")
    targets = [as_tensor(img) for img in images]
    edge_ids = partial.sorted_edges()
    curves = CurveSet.from_graph(graph, edge_ids)
    domain = domain or model_domain(graph, cfg.enlarge)
    h = weights.fd_step if weights.fd_step is not None else default_fd_step(graph.bbox())
    printed = printed_samples(partial, graph)

    fld = DeformationField.create(domain, cfg.seed, EncodingConfig(cfg.num_bands), cfg.hidden, cfg.depth)
    E = len(edge_ids)
    tau = torch.full((E, cfg.K), float(cfg.tau_init), dtype=DTYPE)
    alpha = torch.full((E, cfg.K), float(cfg.alpha_init), dtype=DTYPE)
    acc = GradientAccumulator(fld, tau, alpha)
    params = acc.sources()
    n_theta = len(fld.parameters())
    scales = [1.0] * n_theta + [cfg.lr_tau / cfg.lr0 * cfg.optimize_tau, cfg.lr_alpha / cfg.lr0 * cfg.optimize_alpha]
    state = AdamState.for_params(params, lr0=cfg.lr0, lr_min=cfg.lr_min, decay=cfg.decay)
    tau_floor = 1e-3 * cfg.tau_init

    trace: list[LossBreakdown] = []
    converged = False
    for it in range(1, cfg.max_iters + 1):
        lr = state.lr()
        ctrl, _ = deform_curves(curves, fld, cfg.m)
        kernels = build_kernels(ctrl, cfg.K, tau, alpha)
        rendered = [render_kernels(cam, kernels, cfg.render) for cam in cameras]
        l_img = loss_img(rendered, targets)
        if weights.w_bend > 0:
            l_bend = loss_bend(fld, printed, weights, domain, h, cfg.seed, it)
            total = l_img + weights.w_bend * l_bend
        else:
            total = l_img
            if cfg.bend_when_unweighted:
                with torch.no_grad():
                    l_bend = loss_bend(fld, printed, weights, domain, h, cfg.seed, it)
            else:
                l_bend = torch.zeros((), dtype=DTYPE)
        row = total_loss(l_img.item(), l_bend.item(), weights, it, lr)
        trace.append(row)
        if callback is not None:
            callback(it, row)
        if not math.isfinite(row.l_total):
            raise NumericError(f"non-finite loss at iteration {it}", {"trace": trace})
        acc.record(total)
        grads = grad_of_scalar(acc).all()
        try:
            adam_step(state, params, grads, scales)
        except NumericError as exc:
            exc.diagnostics["trace"] = trace
            raise
        with torch.no_grad():
            tau.clamp_(min=tau_floor)
            alpha.clamp_(0.0, 1.0)
        if _converged(trace, cfg.window, cfg.rel_tol):
            converged = True
            break

    with torch.no_grad():
        ctrl, verts = deform_curves(curves, fld, cfg.m)
    vids = sorted({v for k in edge_ids for v in graph.edges[k].v})
    twin = DigitalTwin(
        deformed_edges={k: BezierCurve(ctrl[i].detach().clone()) for i, k in enumerate(edge_ids)},
        deformed_vertices={v: verts[i].detach().clone() for i, v in enumerate(vids)},
        tau={k: tau[i].detach().numpy().copy() for i, k in enumerate(edge_ids)},
        alpha={k: alpha[i].detach().numpy().copy() for i, k in enumerate(edge_ids)},
    )
    fld.requires_grad_(False)
    return TwinResult(twin, fld, trace, converged, edge_ids, tau.detach().clone(), alpha.detach().clone())


def mean_laplacian_magnitude(field_fn, domain: Domain, h: float, n: int = 2048, seed: int = 12345) -> float:
    """Mean ``|Lap d|`` over uniform points; a smoothness diagnostic for converged fields."""
    with torch.no_grad():
        x = bend_points(domain, n, seed, 0)
        return float(fd_laplacian(field_fn, x, h).norm(dim=-1).mean())


# --- trace export --------------------------------------------------------------------------------


def trace_to_csv(trace: Sequence[LossBreakdown]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "l_img", "l_bend", "l_total", "lr"])
    for r in trace:
        w.writerow([r.iteration, f"{r.l_img:.6g}", f"{r.l_bend:.6g}", f"{r.l_total:.6g}", f"{r.lr:.6g}"])
    return buf.getvalue()


def write_trace(trace: Sequence[LossBreakdown], path: str | Path) -> None:
    Path(path).write_text(trace_to_csv(trace))


def read_trace(path: str | Path) -> list[LossBreakdown]:
    rows = list(csv.DictReader(Path(path).read_text().splitlines()))
    return [LossBreakdown(int(r["iteration"]), float(r["l_img"]), float(r["l_bend"]), float(r["l_total"]), float(r["lr"])) for r in rows]
