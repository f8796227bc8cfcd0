"""Neural deformation field: positional encoding + skip MLP mapping points to displacements."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import InvalidArgument, NumericError, UsageError
from .geometry import DTYPE, as_tensor


@dataclass(frozen=True)
class EncodingConfig:
    num_bands: int = 15
    include_input: bool = True

    def __post_init__(self):
        if self.num_bands < 0:
            raise InvalidArgument("num_bands must be >= 0")

    @property
    def dim(self) -> int:
        return (3 if self.include_input else 0) + 6 * self.num_bands


@dataclass(frozen=True)
class Domain:
    """Box the field is defined on; inputs are mapped affinely onto [-1, 1]^3."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    @classmethod
    def around(cls, lo, hi, enlarge: float = 1.1, min_extent_frac: float = 0.1) -> "Domain":
        """Enlarge a bounding box about its center by ``enlarge``.

        Flat extents are padded to ``min_extent_frac`` of the diagonal so that
        planar models still get a proper 3D domain.
        """
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        center = 0.5 * (lo + hi)
        ext = hi - lo
        diag = float(np.linalg.norm(ext))
        if not diag > 0:
            raise InvalidArgument("degenerate bounding box")
        ext = np.maximum(ext, min_extent_frac * diag) * enlarge
        return cls(tuple(center - ext / 2), tuple(center + ext / 2))

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        lo = torch.tensor(self.lo, dtype=DTYPE)
        hi = torch.tensor(self.hi, dtype=DTYPE)
        return 2.0 * (x - lo) / (hi - lo) - 1.0


def encode(x, cfg: EncodingConfig) -> torch.Tensor:
    """``[x, sin(2^l pi x), cos(2^l pi x) for l < L]`` on already-normalized coordinates."""
    x = as_tensor(x)
    parts = [x] if cfg.include_input else []
    for level in range(cfg.num_bands):
        freq = (2.0**level) * math.pi
        parts.append(torch.sin(freq * x))
        parts.append(torch.cos(freq * x))
    if not parts:
        return x[..., :0]
    return torch.cat(parts, dim=-1)


@dataclass
class MlpParams:
    """Layer weights (``out x in``) and biases; the last layer emits the displacement."""

    weights: list[torch.Tensor]
    biases: list[torch.Tensor]
    hidden: int = 256
    depth: int = 8
    skip_layer: int = 5  # 1-based hidden layer whose input also receives the encoding

    def tensors(self) -> list[torch.Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([t.detach().numpy().ravel() for t in self.tensors()])

    def check_finite(self) -> None:
        for i, t in enumerate(self.tensors()):
            if not torch.isfinite(t).all():
                raise NumericError(f"non-finite values in parameter tensor {i}", {"tensor": i})


def layer_shapes(enc_dim: int, hidden: int = 256, depth: int = 8, skip_layer: int = 5) -> list[tuple[int, int]]:
    shapes = []
    for i in range(1, depth + 1):
        fan_in = enc_dim if i == 1 else hidden
        if i == skip_layer:
            fan_in += enc_dim
        shapes.append((hidden, fan_in))
    shapes.append((3, hidden))
    return shapes


def zero_init(seed: int, enc: EncodingConfig, hidden: int = 256, depth: int = 8, skip_layer: int = 5) -> MlpParams:
    """Uniform fan-in scaled hidden layers; the output layer is exactly zero."""
    gen = torch.Generator().manual_seed(int(seed))
    weights, biases = [], []
    shapes = layer_shapes(enc.dim, hidden, depth, skip_layer)
    for i, (fan_out, fan_in) in enumerate(shapes):
        if i == len(shapes) - 1:
            w = torch.zeros(fan_out, fan_in, dtype=DTYPE)
        else:
            bound = math.sqrt(6.0 / fan_in)
            w = (torch.rand(fan_out, fan_in, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound
        weights.append(w)
        biases.append(torch.zeros(fan_out, dtype=DTYPE))
    return MlpParams(weights, biases, hidden, depth, skip_layer)


def mlp_forward(params: MlpParams, features: torch.Tensor) -> torch.Tensor:
    h = features
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if i + 1 == params.skip_layer and i > 0:
            h = torch.cat([h, features], dim=-1)
        h = torch.nn.functional.linear(h, w, b)
        if i < last:
            h = torch.relu(h)
    return h


@dataclass
class DeformationField:
    """Callable ``d(x)``: ``(N, 3)`` points in model units to ``(N, 3)`` displacements."""

    params: MlpParams
    encoding: EncodingConfig
    domain: Domain
    seed: int = 0
    outside_count: int = field(default=0, compare=False)

    @classmethod
    def create(cls, domain: Domain, seed: int = 0, encoding: EncodingConfig | None = None, hidden: int = 256, depth: int = 8, skip_layer: int = 5) -> "DeformationField":
        encoding = encoding or EncodingConfig()
        return cls(zero_init(seed, encoding, hidden, depth, skip_layer), encoding, domain, seed)

    def __call__(self, x) -> torch.Tensor:
        x = as_tensor(x)
        single = x.ndim == 1
        x = x.reshape(-1, 3)
        xn = self.domain.normalize(x)
        self.outside_count += int((xn.detach().abs() > 1.0).any(dim=-1).sum())
        out = mlp_forward(self.params, encode(xn, self.encoding))
        return out[0] if single else out

    def parameters(self) -> list[torch.Tensor]:
        return self.params.tensors()

    def requires_grad_(self, flag: bool = True) -> "DeformationField":
        for t in self.parameters():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "DeformationField":
        p = self.params
        params = MlpParams([w.detach().clone() for w in p.weights], [b.detach().clone() for b in p.biases], p.hidden, p.depth, p.skip_layer)
        return DeformationField(params, self.encoding, self.domain, self.seed)


def field_eval(fld: DeformationField, x) -> torch.Tensor:
    """Forward pass without building a gradient record."""
    fld.params.check_finite()
    with torch.no_grad():
        return fld(x)


def input_jacobian(fld: DeformationField, x) -> torch.Tensor:
    """``d d / d x`` at one point, ``(3, 3)``."""
    x = as_tensor(x).detach()
    return torch.autograd.functional.jacobian(lambda p: fld(p), x)


# --- gradients -------------------------------------------------------------------


@dataclass
class Gradients:
    theta: list[torch.Tensor]
    tau: torch.Tensor | None = None
    alpha: torch.Tensor | None = None

    def all(self) -> list[torch.Tensor]:
        out = list(self.theta)
        if self.tau is not None:
            out.append(self.tau)
        if self.alpha is not None:
            out.append(self.alpha)
        return out


class GradientAccumulator:
    """Records one scalar built from the field and kernel parameters, then back-propagates it.

    Registration marks the tensors as requiring gradients; torch's autograd
    graph is the recording.
    """

    def __init__(self, fld: DeformationField, tau: torch.Tensor | None = None, alpha: torch.Tensor | None = None):
        self.field = fld.requires_grad_(True)
        self.tau = tau.requires_grad_(True) if tau is not None else None
        self.alpha = alpha.requires_grad_(True) if alpha is not None else None
        self.loss: torch.Tensor | None = None

    def record(self, loss: torch.Tensor) -> torch.Tensor:
        if loss.numel() != 1:
            raise UsageError("only scalar losses can be recorded")
        self.loss = loss
        return loss

    def sources(self) -> list[torch.Tensor]:
        out = self.field.parameters()
        out += [t for t in (self.tau, self.alpha) if t is not None]
        return out


def grad_of_scalar(recording: GradientAccumulator) -> Gradients:
    """Reverse traversal of the recorded computation; unused inputs get zero gradients."""
    if recording.loss is None:
        raise UsageError("backward requested before a forward pass recorded a loss")
    srcs = recording.sources()
    if not recording.loss.requires_grad:
        grads = [torch.zeros_like(s) for s in srcs]
    else:
        grads = torch.autograd.grad(recording.loss, srcs, allow_unused=True)
        grads = [torch.zeros_like(s) if g is None else g for s, g in zip(srcs, grads)]
    recording.loss = None
    n = len(recording.field.parameters())
    theta, rest = list(grads[:n]), list(grads[n:])
    tau = rest.pop(0) if recording.tau is not None else None
    alpha = rest.pop(0) if recording.alpha is not None else None
    return Gradients(theta, tau, alpha)


# --- checkpoints --------------------------------------------------------------------


def save_checkpoint(fld: DeformationField, path: str | Path) -> None:
    """Flat little-endian float64 parameters plus a JSON sidecar (``<path>.json``)."""
    path = Path(path)
    path.write_bytes(fld.params.flat().astype("<f8").tobytes())
    p = fld.params
    meta = {
        "layers": [{"weight": list(w.shape), "bias": list(b.shape)} for w, b in zip(p.weights, p.biases)],
        "hidden": p.hidden,
        "depth": p.depth,
        "skip_layer": p.skip_layer,
        "encoding": {"num_bands": fld.encoding.num_bands, "include_input": fld.encoding.include_input},
        "domain": {"lo": list(fld.domain.lo), "hi": list(fld.domain.hi)},
        "seed": fld.seed,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1) + "\n")


def load_checkpoint(path: str | Path) -> DeformationField:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    flat = np.frombuffer(path.read_bytes(), dtype="<f8")
    weights, biases, pos = [], [], 0
    for layer in meta["layers"]:
        for shape, dest in ((layer["weight"], weights), (layer["bias"], biases)):
            size = int(np.prod(shape))
            dest.append(torch.tensor(flat[pos : pos + size].reshape(shape), dtype=DTYPE))
            pos += size
    if pos != flat.size:
        raise InvalidArgument(f"checkpoint holds {flat.size} values, sidecar describes {pos}")
    params = MlpParams(weights, biases, meta["hidden"], meta["depth"], meta["skip_layer"])
    enc = EncodingConfig(**meta["encoding"])
    dom = Domain(tuple(meta["domain"]["lo"]), tuple(meta["domain"]["hi"]))
    return DeformationField(params, enc, dom, meta["seed"])


def zero_field(x) -> torch.Tensor:
    """Identity deformation as a plain callable."""
    return torch.zeros_like(as_tensor(x))


def affine_field(A: Sequence[Sequence[float]], b: Sequence[float]):
    """``d(x) = A x + b`` as a callable, for oracles and tests."""
    A_t, b_t = as_tensor(A), as_tensor(b)
    return lambda x: as_tensor(x) @ A_t.T + b_t
