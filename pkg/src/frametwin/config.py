"""Run configuration: every tunable with its default, validated on load."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidArgument
from .optimize import LossWeights, TwinConfig

SEED_ENV = "FRAMETWIN_SEED"


@dataclass(frozen=True)
class Config:
    degree: int = 3
    K: int = 32
    m: int = 64
    num_bands: int = 15
    views: int = 8
    resolution: int = 256
    w_bend: float = 1e-7
    p: float = 2.0
    lr0: float = 1.6e-4
    lr_min: float = 1.6e-5
    decay: float = 0.99
    max_iters: int = 300
    bend_samples: int = 4096
    h: float | None = None  # None -> 1% of the model bbox diagonal
    seed: int = 0
    tau: float = 0.3  # nominal strut radius, mm
    lr_tau: float = 5e-3
    lr_alpha: float = 2e-2
    hidden: int = 256
    depth: int = 8
    window: int = 20
    rel_tol: float = 1e-4

    def __post_init__(self):
        checks = [
            (self.degree >= 1, "degree >= 1"),
            (self.K >= 1, "K >= 1"),
            (self.m >= max(1, self.degree), "m >= degree"),
            (self.num_bands >= 0, "num_bands >= 0"),
            (self.views >= 1, "views >= 1"),
            (self.resolution >= 8, "resolution >= 8"),
            (self.w_bend >= 0, "w_bend >= 0"),
            (self.p >= 0, "p >= 0"),
            (self.lr0 > 0 and self.lr_min > 0 and self.lr_min <= self.lr0, "0 < lr_min <= lr0"),
            (0 < self.decay <= 1, "0 < decay <= 1"),
            (self.max_iters >= 1, "max_iters >= 1"),
            (self.bend_samples >= 1, "bend_samples >= 1"),
            (self.h is None or self.h > 0, "h > 0"),
            (self.tau > 0, "tau > 0"),
            (self.hidden >= 1 and self.depth >= 5, "hidden >= 1 and depth >= 5"),
            (self.window >= 1 and self.rel_tol >= 0, "window >= 1 and rel_tol >= 0"),
        ]
        bad = [msg for ok, msg in checks if not ok]
        if bad:
            raise InvalidArgument("config out of range: " + ", ".join(bad))

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(names))
        if unknown:
            raise InvalidArgument(f"unknown config keys: {unknown}")
        kw = {}
        for key, value in data.items():
            ftype = names[key].type
            try:
                if value is None:
                    kw[key] = None
                elif ftype == "int":
                    if isinstance(value, float) and not value.is_integer():
                        raise ValueError(value)
                    kw[key] = int(value)
                else:
                    kw[key] = float(value)
            except (TypeError, ValueError) as exc:
                raise InvalidArgument(f"config key {key!r}: bad value {value!r}") from exc
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict | None = None) -> "Config":
        data = json.loads(Path(path).read_text()) if path else {}
        if not isinstance(data, dict):
            raise InvalidArgument("config file must hold a JSON object")
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                data["seed"] = int(env)
            except ValueError as exc:
                raise InvalidArgument(f"{SEED_ENV}={env!r} is not an integer") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self, extra: dict | None = None) -> str:
        payload = {"config": self.to_dict(), "extra": extra or {}}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def twin_config(self) -> TwinConfig:
        return TwinConfig(
            max_iters=self.max_iters,
            window=self.window,
            rel_tol=self.rel_tol,
            seed=self.seed,
            K=self.K,
            m=self.m,
            tau_init=self.tau,
            lr0=self.lr0,
            lr_min=self.lr_min,
            decay=self.decay,
            lr_tau=self.lr_tau,
            lr_alpha=self.lr_alpha,
            num_bands=self.num_bands,
            hidden=self.hidden,
            depth=self.depth,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(w_bend=self.w_bend, p_exponent=self.p, fd_step=self.h, bend_samples=self.bend_samples)
