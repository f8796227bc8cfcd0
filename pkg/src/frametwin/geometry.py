"""Bezier curves, Bishop (parallel-transport) frames and endpoint-constrained refits.

Everything here works on float64 torch tensors so that curve geometry stays
differentiable with respect to the points it is built from.  Plain sequences
and numpy arrays are accepted wherever a tensor is expected.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateCurveError, IllConditionedError, InvalidArgument

DTYPE = torch.float64

#: Pivot ratio below which the refit normal matrix is declared singular.
PIVOT_RTOL = 1e-12
#: Tangent norm under which a curve derivative is treated as zero.
TANGENT_EPS = 1e-9


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_unit_interval(u: float) -> None:
    if not (0.0 <= u <= 1.0):
        raise InvalidArgument(f"curve parameter {u!r} outside [0, 1]")


def bernstein(n: int, i: int, u: float) -> float:
    """Bernstein basis polynomial ``C(n, i) u^i (1 - u)^(n - i)``."""
    if n < 0 or not (0 <= i <= n):
        raise InvalidArgument(f"bernstein index i={i} out of range for degree n={n}")
    _check_unit_interval(u)
    return math.comb(n, i) * u**i * (1.0 - u) ** (n - i)


def bernstein_matrix(n: int, params) -> torch.Tensor:
    """Basis values as a ``(len(params), n + 1)`` matrix."""
    u = as_tensor(params).reshape(-1, 1)
    i = torch.arange(n + 1, dtype=DTYPE)
    binom = torch.tensor([math.comb(n, k) for k in range(n + 1)], dtype=DTYPE)
    # torch.pow(0, 0) == 1, which is the convention the endpoints need
    return binom * torch.pow(u, i) * torch.pow(1.0 - u, n - i)


@dataclass(frozen=True)
class BezierCurve:
    ctrl: torch.Tensor  # (degree + 1, 3)

    def __post_init__(self):
        ctrl = as_tensor(self.ctrl)
        if ctrl.ndim != 2 or ctrl.shape[1] != 3 or ctrl.shape[0] < 2:
            raise InvalidArgument(f"control points must be (n+1, 3) with n >= 1, got {tuple(ctrl.shape)}")
        if not torch.isfinite(ctrl).all():
            raise InvalidArgument("control points must be finite")
        object.__setattr__(self, "ctrl", ctrl)

    @property
    def degree(self) -> int:
        return self.ctrl.shape[0] - 1

    @classmethod
    def straight(cls, a, b, degree: int = 3) -> "BezierCurve":
        """Segment from ``a`` to ``b`` with uniformly spaced control points."""
        a, b = as_tensor(a), as_tensor(b)
        s = torch.linspace(0.0, 1.0, degree + 1, dtype=DTYPE).reshape(-1, 1)
        return cls((1.0 - s) * a + s * b)


@dataclass(frozen=True)
class CurveSamples:
    params: torch.Tensor  # (m + 1,)
    points: torch.Tensor  # (m + 1, 3)


@dataclass(frozen=True)
class BishopFrame:
    t: torch.Tensor
    n: torch.Tensor
    b: torch.Tensor

    def matrix(self) -> torch.Tensor:
        """Frame as columns ``[t n b]``."""
        return torch.stack([self.t, self.n, self.b], dim=-1)


@dataclass(frozen=True)
class LeastSquaresSystem:
    S: torch.Tensor  # (n - 1, n - 1)
    r: torch.Tensor  # (n - 1, 3)


def eval_points(ctrl: torch.Tensor, params) -> torch.Tensor:
    """Batched evaluation: ``ctrl`` is ``(..., n+1, 3)``, result ``(..., M, 3)``."""
    B = bernstein_matrix(ctrl.shape[-2] - 1, params)
    return B @ ctrl


def eval_derivative(ctrl: torch.Tensor, params) -> torch.Tensor:
    """First derivative ``c'(u)`` of a batch of curves at ``params``."""
    n = ctrl.shape[-2] - 1
    hodograph = n * (ctrl[..., 1:, :] - ctrl[..., :-1, :])
    return bernstein_matrix(n - 1, params) @ hodograph


def eval_curve(curve: BezierCurve, u: float) -> torch.Tensor:
    _check_unit_interval(u)
    return eval_points(curve.ctrl, [u])[0]


def sample_curve(curve: BezierCurve, m: int) -> CurveSamples:
    """Sample at ``u_j = j / m`` for ``j = 0..m``."""
    if m < 1 or m < curve.degree:
        raise InvalidArgument(f"need m >= degree ({curve.degree}) samples for a refit, got m={m}")
    params = torch.arange(m + 1, dtype=DTYPE) / m
    return CurveSamples(params, eval_points(curve.ctrl, params))


# --- Bishop frames ---------------------------------------------------------


def _initial_normal(t: torch.Tensor) -> torch.Tensor:
    # global axis least aligned with t, projected onto the normal plane
    idx = torch.argmin(t.detach().abs(), dim=-1)
    e = torch.nn.functional.one_hot(idx, 3).to(DTYPE)
    n = e - (e * t).sum(-1, keepdim=True) * t
    return n / n.norm(dim=-1, keepdim=True)


def _fill_degenerate(d: torch.Tensor) -> torch.Tensor:
    """Replace near-zero derivatives by the nearest valid one along the curve."""
    norms = d.detach().norm(dim=-1)
    bad = norms < TANGENT_EPS
    if not bad.any():
        return d
    if bad.all(dim=-1).any():
        raise DegenerateCurveError("curve derivative vanishes at every requested parameter")
    M = d.shape[-2]
    pos = torch.arange(M)
    out = d.clone()
    for idx in zip(*torch.nonzero(bad.reshape(-1, M), as_tuple=True)):
        row, j = int(idx[0]), int(idx[1])
        good = torch.nonzero(~bad.reshape(-1, M)[row]).flatten()
        nearest = good[torch.argmin((pos[good] - j).abs())]
        out.reshape(-1, M, 3)[row, j] = d.reshape(-1, M, 3)[row, nearest]
    return out


def transport_frames(points: torch.Tensor, derivs: torch.Tensor) -> torch.Tensor:
    """Rotation-minimizing frames along sampled curves by double reflection.

    ``points`` and ``derivs`` are ``(..., M, 3)``; returns ``(..., M, 3, 3)``
    with columns ``[t n b]``.
    """
    derivs = _fill_degenerate(derivs)
    t = derivs / derivs.norm(dim=-1, keepdim=True)
    r = _initial_normal(t[..., 0, :])
    normals = [r]
    for i in range(t.shape[-2] - 1):
        v1 = points[..., i + 1, :] - points[..., i, :]
        c1 = (v1 * v1).sum(-1, keepdim=True)
        ok1 = c1 > 1e-30
        c1s = torch.where(ok1, c1, torch.ones_like(c1))
        rl = torch.where(ok1, r - (2.0 / c1s) * (v1 * r).sum(-1, keepdim=True) * v1, r)
        tl = torch.where(ok1, t[..., i, :] - (2.0 / c1s) * (v1 * t[..., i, :]).sum(-1, keepdim=True) * v1, t[..., i, :])
        v2 = t[..., i + 1, :] - tl
        c2 = (v2 * v2).sum(-1, keepdim=True)
        ok2 = c2 > 1e-30
        c2s = torch.where(ok2, c2, torch.ones_like(c2))
        r = torch.where(ok2, rl - (2.0 / c2s) * (v2 * rl).sum(-1, keepdim=True) * v2, rl)
        # remove rounding drift out of the normal plane
        ti = t[..., i + 1, :]
        r = r - (r * ti).sum(-1, keepdim=True) * ti
        r = r / r.norm(dim=-1, keepdim=True)
        normals.append(r)
    n = torch.stack(normals, dim=-2)
    b = torch.linalg.cross(t, n, dim=-1)
    return torch.stack([t, n, b], dim=-1)


def bishop_frames(curve: BezierCurve, params) -> list[BishopFrame]:
    """Bishop frames of ``curve`` at the sorted ``params``."""
    u = as_tensor(params).reshape(-1)
    if u.numel() == 0:
        return []
    if (u < 0).any() or (u > 1).any() or (u[1:] < u[:-1]).any():
        raise InvalidArgument("params must be sorted within [0, 1]")
    F = transport_frames(eval_points(curve.ctrl, u), eval_derivative(curve.ctrl, u))
    return [BishopFrame(f[:, 0], f[:, 1], f[:, 2]) for f in F]


# --- endpoint-constrained refit --------------------------------------------


def build_system(params, displaced, degree: int) -> LeastSquaresSystem:
    """Normal equations for the interior control points of a constrained refit."""
    B = bernstein_matrix(degree, params)
    D = as_tensor(displaced)
    inner = B[:, 1:degree]
    S = inner.T @ inner
    rhs = D - B[:, :1] * D[0] - B[:, degree:] * D[-1]
    return LeastSquaresSystem(S, inner.T @ rhs)


def _spd_solve_factor(S: np.ndarray) -> np.ndarray:
    """Inverse of ``S`` via LDL^T, refusing near-singular systems."""
    k = S.shape[0]
    L = np.eye(k)
    d = np.zeros(k)
    for j in range(k):
        d[j] = S[j, j] - (L[j, :j] ** 2 * d[:j]).sum()
        for i in range(j + 1, k):
            L[i, j] = (S[i, j] - (L[i, :j] * L[j, :j] * d[:j]).sum()) / d[j] if d[j] != 0 else 0.0
    if not np.all(np.isfinite(d)) or d.min() <= PIVOT_RTOL * max(d.max(), 0.0):
        raise IllConditionedError(f"refit matrix is ill-conditioned (pivots {d.tolist()})")
    Linv = np.linalg.inv(L)
    return Linv.T @ np.diag(1.0 / d) @ Linv


def solve_system(system: LeastSquaresSystem) -> torch.Tensor:
    if system.S.numel() == 0:
        return system.r
    Sinv = torch.as_tensor(_spd_solve_factor(system.S.detach().numpy()))
    return Sinv @ system.r


@functools.lru_cache(maxsize=64)
def _refit_operator(params: tuple, degree: int) -> torch.Tensor:
    """Matrix mapping ``m + 1`` displaced samples to ``degree + 1`` control points."""
    M = len(params)
    if M < degree + 1:
        raise IllConditionedError(f"{M} samples cannot determine a degree-{degree} curve")
    if any(b <= a for a, b in zip(params, params[1:])):
        raise IllConditionedError("refit params must be strictly increasing")
    B = bernstein_matrix(degree, params)
    op = torch.zeros(degree + 1, M, dtype=DTYPE)
    op[0, 0] = 1.0
    op[degree, M - 1] = 1.0
    if degree > 1:
        inner = B[:, 1:degree]
        Sinv = torch.as_tensor(_spd_solve_factor((inner.T @ inner).numpy()))
        # rhs_j = D_j - B0(u_j) D_0 - Bn(u_j) D_last
        P = torch.eye(M, dtype=DTYPE)
        P[:, 0] -= B[:, 0]
        P[:, M - 1] -= B[:, degree]
        op[1:degree] = Sinv @ inner.T @ P
    return op


def refit_ctrl(params, displaced: torch.Tensor, degree: int) -> torch.Tensor:
    """Differentiable batched refit: ``(..., m+1, 3)`` samples to ``(..., n+1, 3)`` control points.

    The first and last samples become the end control points exactly.
    """
    key = tuple(float(u) for u in as_tensor(params).reshape(-1).tolist())
    op = _refit_operator(key, degree)
    out = op @ displaced
    # pin endpoints bitwise instead of trusting the 1.0 entries of the matmul
    out = torch.cat([displaced[..., :1, :], out[..., 1:degree, :], displaced[..., -1:, :]], dim=-2)
    return out


def refit_curve(samples: CurveSamples, displaced, degree: int) -> BezierCurve:
    """Least-squares Bezier through ``displaced`` with pinned endpoints."""
    D = as_tensor(displaced)
    if D.shape[0] != samples.params.shape[0]:
        raise InvalidArgument(f"{D.shape[0]} displaced points for {samples.params.shape[0]} params")
    if D.shape[0] < degree + 1:
        raise IllConditionedError(f"{D.shape[0]} samples cannot determine a degree-{degree} curve")
    return BezierCurve(refit_ctrl(samples.params, D, degree))


def constrained_residual(ctrl, params, targets) -> float:
    """Sum of squared distances between a curve and its target samples."""
    diff = eval_points(as_tensor(ctrl), params) - as_tensor(targets)
    return float((diff**2).sum())
