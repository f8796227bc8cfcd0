"""Curve-anchored Gaussian kernels and a differentiable grayscale splatting rasterizer."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import InvalidArgument
from .geometry import (
    DTYPE,
    BezierCurve,
    BishopFrame,
    as_tensor,
    eval_derivative,
    eval_points,
    refit_ctrl,
    transport_frames,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RenderOptions:
    support_sigma: float = 3.0  # kernels are evaluated inside this Mahalanobis radius
    min_transmittance: float = 1e-4
    cov_eps: float = 0.3  # px^2 added to every projected covariance
    near: float = 1e-2  # mm


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_cam: np.ndarray  # (4, 4)

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        if self.width < 1 or self.height < 1:
            raise InvalidArgument("camera image size must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgument("focal lengths must be positive")
        R = self.rotation
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidArgument("camera rotation is not orthonormal with det +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def scaled(self, factor: float) -> "Camera":
        """Same pose with image size and intrinsics scaled (pixel centers kept consistent)."""
        return Camera(
            int(round(self.width * factor)),
            int(round(self.height * factor)),
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            self.world_to_cam,
        )

    def project(self, pts) -> np.ndarray:
        """Pixel coordinates ``(N, 2)`` of world points (no culling)."""
        X = np.asarray(pts, float).reshape(-1, 3) @ self.rotation.T + self.translation
        return np.stack([self.fx * X[:, 0] / X[:, 2] + self.cx, self.fy * X[:, 1] / X[:, 2] + self.cy], axis=1)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "fx": float(f"{self.fx:.17g}"),
            "fy": float(f"{self.fy:.17g}"),
            "cx": float(f"{self.cx:.17g}"),
            "cy": float(f"{self.cy:.17g}"),
            "world_to_cam": [float(f"{v:.17g}") for v in self.world_to_cam.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        try:
            return cls(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), np.asarray(d["world_to_cam"], float))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgument(f"malformed camera JSON: {exc}") from exc


def save_cameras(cams: Sequence[Camera], path: str | Path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cams], indent=1) + "\n")


def load_cameras(path: str | Path) -> list[Camera]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [Camera.from_dict(d) for d in data]


@dataclass(frozen=True)
class AnchoredKernel:
    edge: int
    slot: int
    mean: torch.Tensor
    frame: BishopFrame
    sigma_t: float
    sigma_n: float
    sigma_b: float
    alpha: float

    def covariance(self) -> torch.Tensor:
        return covariance(self.frame, self.sigma_t, self.sigma_n, self.sigma_b)


@dataclass(frozen=True)
class Splat2D:
    mean2d: torch.Tensor  # (2,) pixel coordinates (x = column, y = row)
    cov2d: torch.Tensor  # (2, 2)
    depth: float
    alpha: float


# --- kernels -----------------------------------------------------------------------


def kernel_params(K: int) -> torch.Tensor:
    if K < 1:
        raise InvalidArgument("need at least one kernel per curve")
    return (torch.arange(K, dtype=DTYPE) + 0.5) / K


def anchor_batch(ctrl: torch.Tensor, K: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Means ``(E, K, 3)``, frames ``(E, K, 3, 3)`` and axial scales ``(E, K)`` for curves ``(E, n+1, 3)``."""
    u = kernel_params(K)
    means = eval_points(ctrl, u)
    frames = transport_frames(means, eval_derivative(ctrl, u))
    half = 0.5 / K
    ends = eval_points(ctrl, torch.clamp(u + half, 0.0, 1.0)) - eval_points(ctrl, torch.clamp(u - half, 0.0, 1.0))
    return means, frames, ends.norm(dim=-1)


def anchor_kernels(curve: BezierCurve, K: int, tau: Sequence[float], alpha: Sequence[float], edge: int = 0) -> list[AnchoredKernel]:
    tau, alpha = list(map(float, tau)), list(map(float, alpha))
    if len(tau) != K or len(alpha) != K:
        raise InvalidArgument(f"need {K} thickness and opacity values, got {len(tau)} and {len(alpha)}")
    means, frames, st = anchor_batch(curve.ctrl[None], K)
    return [
        AnchoredKernel(edge, j, means[0, j], BishopFrame(frames[0, j, :, 0], frames[0, j, :, 1], frames[0, j, :, 2]), float(st[0, j]), tau[j], tau[j], alpha[j])
        for j in range(K)
    ]


def covariance(frame: BishopFrame | torch.Tensor, sigma_t, sigma_n, sigma_b) -> torch.Tensor:
    """``F S (S F)^T`` with ``S = diag(sigma_t, sigma_n, sigma_b)``."""
    F = frame.matrix() if isinstance(frame, BishopFrame) else as_tensor(frame)
    if torch.abs(F.T @ F - torch.eye(3, dtype=DTYPE)).max() > 1e-9:
        raise InvalidArgument("frame is not orthonormal")
    s = torch.stack([as_tensor(sigma_t), as_tensor(sigma_n), as_tensor(sigma_b)])
    if (s <= 0).any():
        raise InvalidArgument("kernel scales must be positive")
    FS = F * s
    return FS @ FS.T


def covariance_batch(frames: torch.Tensor, sigma_t: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
    FS = frames * torch.stack([sigma_t, tau, tau], dim=-1)[..., None, :]
    return FS @ FS.transpose(-1, -2)


# --- projection ----------------------------------------------------------------------


def project_batch(cam: Camera, means: torch.Tensor, cov3: torch.Tensor, opts: RenderOptions = RenderOptions()):
    """EWA projection: returns ``mean2d (N,2)``, ``cov2d (N,2,2)``, ``depth (N,)`` and a visibility mask."""
    R = torch.as_tensor(cam.rotation)
    t = torch.as_tensor(cam.translation)
    Xc = means @ R.T + t
    z = Xc[:, 2]
    visible = z.detach() > opts.near
    zs = torch.where(visible, z, torch.ones_like(z))
    x, y = Xc[:, 0], Xc[:, 1]
    mean2d = torch.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], dim=-1)
    zero = torch.zeros_like(zs)
    J = torch.stack(
        [
            torch.stack([cam.fx / zs, zero, -cam.fx * x / zs**2], dim=-1),
            torch.stack([zero, cam.fy / zs, -cam.fy * y / zs**2], dim=-1),
        ],
        dim=-2,
    )
    T = J @ R
    cov2d = T @ cov3 @ T.transpose(-1, -2) + opts.cov_eps * torch.eye(2, dtype=DTYPE)
    return mean2d, cov2d, z, visible


def project_kernel(cam: Camera, kernel: AnchoredKernel, opts: RenderOptions = RenderOptions()) -> Splat2D | None:
    mean2d, cov2d, z, visible = project_batch(cam, kernel.mean[None], kernel.covariance()[None], opts)
    if not bool(visible[0]) or _support_boxes(cam, mean2d, cov2d, opts)[4][0] == 0:
        return None
    return Splat2D(mean2d[0], cov2d[0], float(z[0]), kernel.alpha)


def _support_boxes(cam: Camera, mean2d: torch.Tensor, cov2d: torch.Tensor, opts: RenderOptions):
    m = mean2d.detach()
    c = cov2d.detach()
    rx = opts.support_sigma * torch.sqrt(c[:, 0, 0].clamp_min(0))
    ry = opts.support_sigma * torch.sqrt(c[:, 1, 1].clamp_min(0))
    x0 = torch.ceil(m[:, 0] - rx).clamp(0, cam.width).to(torch.int64)
    x1 = torch.floor(m[:, 0] + rx).clamp(-1, cam.width - 1).to(torch.int64)
    y0 = torch.ceil(m[:, 1] - ry).clamp(0, cam.height).to(torch.int64)
    y1 = torch.floor(m[:, 1] + ry).clamp(-1, cam.height - 1).to(torch.int64)
    nx = (x1 - x0 + 1).clamp_min(0)
    ny = (y1 - y0 + 1).clamp_min(0)
    return x0, y0, nx, ny, nx * ny


@dataclass
class RenderStats:
    splats: int = 0
    culled: int = 0
    skipped_non_spd: int = 0
    pairs: int = 0


def rasterize_tensors(
    cam: Camera,
    mean2d: torch.Tensor,
    cov2d: torch.Tensor,
    depth: torch.Tensor,
    alpha: torch.Tensor,
    visible: torch.Tensor | None = None,
    opts: RenderOptions = RenderOptions(),
) -> tuple[torch.Tensor, RenderStats]:
    """Front-to-back alpha compositing of white splats on black; image is ``(H, W)``."""
    N = mean2d.shape[0]
    stats = RenderStats(splats=N)
    image = torch.zeros(cam.height * cam.width, dtype=DTYPE)
    if N == 0:
        return image.reshape(cam.height, cam.width), stats
    keep = torch.ones(N, dtype=torch.bool) if visible is None else visible.clone()
    c = cov2d.detach()
    det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] * c[:, 1, 0]
    spd = torch.isfinite(det) & (det > 0) & (c[:, 0, 0] > 0) & torch.isfinite(mean2d.detach()).all(-1)
    stats.skipped_non_spd = int((keep & ~spd).sum())
    keep &= spd
    x0, y0, nx, ny, count = _support_boxes(cam, torch.where(keep[:, None], mean2d.detach(), 0.0), torch.where(keep[:, None, None], c, torch.eye(2, dtype=DTYPE)), opts)
    count = torch.where(keep, count, torch.zeros_like(count))
    stats.culled = int((count == 0).sum())
    total = int(count.sum())
    if total == 0:
        return image.reshape(cam.height, cam.width), stats

    kid = torch.repeat_interleave(torch.arange(N), count)
    offsets = torch.cumsum(count, 0) - count
    local = torch.arange(total) - offsets[kid]
    px = x0[kid] + local % nx[kid]
    py = y0[kid] + local // nx[kid]

    # inverse of each 2x2 covariance, kept differentiable
    a, b, d = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det_t = a * d - b * b
    inv = torch.stack([d / det_t, -b / det_t, a / det_t], dim=-1)

    with torch.no_grad():
        dx = px.to(DTYPE) - mean2d[kid, 0]
        dy = py.to(DTYPE) - mean2d[kid, 1]
        iv = inv[kid]
        q = iv[:, 0] * dx * dx + 2 * iv[:, 1] * dx * dy + iv[:, 2] * dy * dy
        inside = q <= opts.support_sigma**2
    kid, px, py = kid[inside], px[inside], py[inside]
    stats.pairs = int(kid.numel())
    if kid.numel() == 0:
        return image.reshape(cam.height, cam.width), stats

    # depth order is global per view; ties broken by kernel index
    order = torch.argsort(depth.detach(), stable=True)
    rank = torch.empty_like(order)
    rank[order] = torch.arange(N)
    pix = py * cam.width + px
    perm = torch.argsort(pix * N + rank[kid], stable=True)
    kid, px, py, pix = kid[perm], px[perm], py[perm], pix[perm]

    dx = px.to(DTYPE) - mean2d[kid, 0]
    dy = py.to(DTYPE) - mean2d[kid, 1]
    iv = inv[kid]
    q = iv[:, 0] * dx * dx + 2 * iv[:, 1] * dx * dy + iv[:, 2] * dy * dy
    w = alpha[kid] * torch.exp(-0.5 * q)

    seg_pix, seg_len = torch.unique_consecutive(pix, return_counts=True)
    S, Lmax = seg_pix.numel(), int(seg_len.max())
    seg = torch.repeat_interleave(torch.arange(S), seg_len)
    pos = torch.arange(pix.numel()) - (torch.cumsum(seg_len, 0) - seg_len)[seg]
    keep_frac = torch.ones(S, Lmax, dtype=DTYPE).index_put((seg, pos), 1.0 - w)
    trans = torch.cumprod(keep_frac, dim=1)
    before = torch.cat([torch.ones(S, 1, dtype=DTYPE), trans[:, :-1]], dim=1)[seg, pos]
    live = before.detach() >= opts.min_transmittance
    contrib = torch.where(live, w * before, torch.zeros_like(w))
    intensity = torch.zeros(S, dtype=DTYPE).index_add(0, seg, contrib)
    image = image.index_put((seg_pix,), intensity)
    return image.reshape(cam.height, cam.width), stats


def rasterize(cam: Camera, splats: Sequence[Splat2D], opts: RenderOptions = RenderOptions()) -> torch.Tensor:
    if not splats:
        return torch.zeros(cam.height, cam.width, dtype=DTYPE)
    mean2d = torch.stack([as_tensor(s.mean2d) for s in splats])
    cov2d = torch.stack([as_tensor(s.cov2d) for s in splats])
    depth = torch.tensor([float(s.depth) for s in splats], dtype=DTYPE)
    alpha = torch.stack([as_tensor(s.alpha).reshape(()) for s in splats])
    img, stats = rasterize_tensors(cam, mean2d, cov2d, depth, alpha, opts=opts)
    if stats.skipped_non_spd:
        log.warning("skipped %d splats with non-SPD covariance", stats.skipped_non_spd)
    return img


# --- full pipeline -------------------------------------------------------------------------


@dataclass
class CurveSet:
    """Reference curves of the printed edges plus vertex bookkeeping for deformation."""

    ctrl: torch.Tensor  # (E, n+1, 3)
    ends: torch.Tensor  # (E, 2) indices into ``vertices``
    vertices: torch.Tensor  # (V', 3) unique endpoint positions

    @classmethod
    def from_graph(cls, graph, edge_ids: Sequence[int]) -> "CurveSet":
        edge_ids = list(edge_ids)
        vids = sorted({v for k in edge_ids for v in graph.edges[k].v})
        local = {v: i for i, v in enumerate(vids)}
        ends = torch.tensor([[local[graph.edges[k].v[0]], local[graph.edges[k].v[1]]] for k in edge_ids], dtype=torch.int64).reshape(-1, 2)
        ctrl = graph.ctrl_stack(edge_ids) if edge_ids else torch.zeros(0, graph.degree + 1, 3, dtype=DTYPE)
        return cls(ctrl, ends, graph.vertices[vids] if vids else torch.zeros(0, 3, dtype=DTYPE))

    @property
    def degree(self) -> int:
        return self.ctrl.shape[1] - 1


def deform_curves(curves: CurveSet, field_fn: Callable[[torch.Tensor], torch.Tensor] | None, m: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    """Deformed control points ``(E, n+1, 3)`` and deformed vertices ``(V', 3)``.

    Samples ``p_j = c(j/m)`` move to ``p_j + d(p_j)``; the refit keeps the end
    control points at ``v + d(v)``.  Because the refit is linear and
    reproduces a degree-n curve from its own samples, the deformed curve is
    the reference plus the refit of the displacements.
    """
    E, deg = curves.ctrl.shape[0], curves.degree
    if E == 0:
        return curves.ctrl, curves.vertices
    if field_fn is None:
        field_fn = torch.zeros_like
    params = torch.arange(m + 1, dtype=DTYPE) / m
    inner = eval_points(curves.ctrl, params)[:, 1:-1]
    pts = torch.cat([inner.reshape(-1, 3), curves.vertices])
    disp = field_fn(pts)
    d_inner = disp[: inner.shape[0] * inner.shape[1]].reshape(E, m - 1, 3)
    d_vert = disp[inner.shape[0] * inner.shape[1] :]
    D = torch.cat([d_vert[curves.ends[:, 0]][:, None], d_inner, d_vert[curves.ends[:, 1]][:, None]], dim=1)
    ctrl = curves.ctrl + refit_ctrl(params, D, deg)
    v_new = curves.vertices + d_vert
    ctrl = torch.cat([v_new[curves.ends[:, 0]][:, None], ctrl[:, 1:-1], v_new[curves.ends[:, 1]][:, None]], dim=1)
    return ctrl, v_new


@dataclass
class KernelSet:
    means: torch.Tensor  # (N, 3)
    cov: torch.Tensor  # (N, 3, 3)
    alpha: torch.Tensor  # (N,)


def build_kernels(ctrl: torch.Tensor, K: int, tau: torch.Tensor, alpha: torch.Tensor) -> KernelSet:
    means, frames, sigma_t = anchor_batch(ctrl, K)
    cov = covariance_batch(frames, sigma_t, tau)
    return KernelSet(means.reshape(-1, 3), cov.reshape(-1, 3, 3), alpha.reshape(-1))


def render_kernels(cam: Camera, kernels: KernelSet, opts: RenderOptions = RenderOptions()) -> torch.Tensor:
    mean2d, cov2d, depth, visible = project_batch(cam, kernels.means, kernels.cov, opts)
    img, stats = rasterize_tensors(cam, mean2d, cov2d, depth, kernels.alpha, visible, opts)
    if stats.skipped_non_spd:
        log.warning("skipped %d splats with non-SPD covariance", stats.skipped_non_spd)
    return img


def render_view(
    curves: CurveSet,
    tau: torch.Tensor,
    alpha: torch.Tensor,
    field_fn,
    cam: Camera,
    K: int = 32,
    m: int = 64,
    opts: RenderOptions = RenderOptions(),
) -> torch.Tensor:
    """Deform, refit, anchor, project and composite one view."""
    ctrl, _ = deform_curves(curves, field_fn, m)
    return render_kernels(cam, build_kernels(ctrl, K, tau, alpha), opts)


def render_views(curves, tau, alpha, field_fn, cams: Sequence[Camera], K: int = 32, m: int = 64, opts: RenderOptions = RenderOptions()) -> list[torch.Tensor]:
    """Like :func:`render_view` for several cameras, deforming once."""
    ctrl, _ = deform_curves(curves, field_fn, m)
    kernels = build_kernels(ctrl, K, tau, alpha)
    return [render_kernels(cam, kernels, opts) for cam in cams]


# --- PGM ------------------------------------------------------------------------------------


def to_bytes(image) -> np.ndarray:
    img = np.asarray(image.detach() if isinstance(image, torch.Tensor) else image, dtype=np.float64)
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path: str | Path, image) -> None:
    """Binary 8-bit PGM (P5), rounding half up."""
    data = image if isinstance(image, np.ndarray) and image.dtype == np.uint8 else to_bytes(image)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm_bytes(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise InvalidArgument(f"{path}: only 8-bit binary PGM (P5) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise InvalidArgument(f"{path}: truncated image data")
    return data.reshape(h, w).copy()


def read_pgm(path: str | Path) -> torch.Tensor:
    return torch.as_tensor(read_pgm_bytes(path).astype(np.float64) / 255.0)
