"""Run configuration, loaded from JSON that mirrors these dataclasses field-for-field."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidParameterError


@dataclass
class LossWeights:
    lam: float = 0.1          # perceptual term inside texture/geometry alignment
    mse: float = 1.0
    mask: float = 1.0
    ta: float = 1.0
    ga: float = 1.0
    t2i: float = 0.01
    ma: float = 1.0
    time: float = 0.01
    mv: float = 0.01


@dataclass
class LearningRates:
    positions: float = 1.6e-4
    colors: float = 2.5e-3
    opacity_logits: float = 5e-2
    log_scales: float = 5e-3
    rotations: float = 1e-3
    field: float = 1e-3

    def cloud_rates(self):
        return {"positions": self.positions, "colors": self.colors, "opacity_logits": self.opacity_logits,
                "log_scales": self.log_scales, "rotations": self.rotations}


@dataclass
class FocalConfig:
    initial_focal: float | None = None   # None: image width
    offset_min: float = -64.0
    offset_max: float = 64.0
    count: int = 33
    coarse_to_fine: bool = False
    per_frame: bool = False
    jitter: float = 8.0
    fixed_focal: float | None = None     # skip the sweep entirely
    diagnostics: str | None = None       # CSV path for the MSE curve


@dataclass
class RunConfig:
    frames_dir: str | None = None
    meshes_dir: str | None = None
    out_dir: str = "out"
    height: int = 64
    width: int = 64
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    weights: LossWeights = field(default_factory=LossWeights)
    rates: LearningRates = field(default_factory=LearningRates)
    static_iters: int = 400
    dynamic_iters: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_views: int = 4
    n_frames: int = 8
    seed: int = 0
    oracle: str = "mock"
    prompt: str = ""
    focal: FocalConfig = field(default_factory=FocalConfig)
    num_points: int = 1500
    camera_radius: float = 3.0
    elevation_range: list = field(default_factory=lambda: [-15.0, 30.0])
    tau_range: list = field(default_factory=lambda: [0.02, 0.98])
    independent_noise: bool = False
    hidden: int = 64
    pos_freqs: int = 6
    time_freqs: int = 4
    deform_opacity: bool = False
    feature_seed: int = 0

    def __post_init__(self):
        for name in ("static_iters", "dynamic_iters", "n_views", "n_frames", "num_points"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be non-negative")
        for name, value in dataclasses.asdict(self.weights).items():
            if value < 0:
                raise InvalidParameterError(f"loss weight {name} must be non-negative")

    @property
    def total_iters(self):
        return self.static_iters + self.dynamic_iters

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "config")

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def updated(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_NESTED = {"weights": LossWeights, "rates": LearningRates, "focal": FocalConfig}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise InvalidParameterError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidParameterError(f"unknown keys in {where}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(key) if cls is RunConfig else None
        kwargs[key] = _build(sub, value, f"{where}.{key}") if sub else value
    return cls(**kwargs)
