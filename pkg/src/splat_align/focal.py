"""Focal-length search against a reference mesh."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidParameterError
from .losses import mse_loss
from .render import render_mesh
from .scene import Camera, ImageBuffer, TriMesh


@dataclass
class FocalSweepConfig:
    initial_focal: float
    offset_min: float = -64.0
    offset_max: float = 64.0
    count: int = 33
    pose: Camera | None = None
    coarse_to_fine: bool = False

    def __post_init__(self):
        if self.count < 1:
            raise InvalidParameterError("focal sweep needs at least one candidate")
        if self.offset_min > self.offset_max:
            raise InvalidParameterError("offset_min must not exceed offset_max")

    def candidates(self):
        if self.count == 1:
            return np.array([self.initial_focal + self.offset_min], dtype=np.float64)
        return np.linspace(self.initial_focal + self.offset_min, self.initial_focal + self.offset_max, self.count)

    @property
    def step(self):
        return 0.0 if self.count == 1 else (self.offset_max - self.offset_min) / (self.count - 1)


class SweepResult(NamedTuple):
    focal: float
    mses: np.ndarray
    candidates: np.ndarray


def _curve(mesh, frame, pose, candidates, background):
    mses = np.full(len(candidates), np.inf)
    for i, f in enumerate(candidates):
        if f > 0:
            mses[i] = mse_loss(render_mesh(mesh, pose.with_focal(f), background), frame).value
    return mses


def sweep_focal(mesh: TriMesh, frame: ImageBuffer, cfg: FocalSweepConfig, background=(0.0, 0.0, 0.0)) -> SweepResult:
    """Render the mesh's front view at evenly spaced focals and keep the best match.

    Non-positive candidates are skipped (MSE reported as ``inf``). Ties go
    to the first candidate.
    """
    if mesh.is_empty:
        raise InvalidParameterError("cannot sweep focal against an empty mesh")
    pose = cfg.pose
    if pose is None:
        pose = Camera(cfg.initial_focal, frame.width / 2.0, frame.height / 2.0, frame.height, frame.width)
    if pose.shape != frame.shape:
        raise InvalidParameterError(f"frame size {frame.shape} does not match camera {pose.shape}")
    candidates = cfg.candidates()
    if cfg.count == 1:
        return SweepResult(float(candidates[0]), _curve(mesh, frame, pose, candidates, background), candidates)
    mses = _curve(mesh, frame, pose, candidates, background)
    best = float(candidates[int(np.argmin(mses))])
    if cfg.coarse_to_fine:
        half = (cfg.offset_max - cfg.offset_min) / 16.0
        fine = np.linspace(best - half, best + half, cfg.count)
        fine_mses = _curve(mesh, frame, pose, fine, background)
        candidates = np.concatenate([candidates, fine])
        mses = np.concatenate([mses, fine_mses])
        best = float(candidates[int(np.argmin(mses))])
    return SweepResult(best, mses, candidates)


def write_curve_csv(result: SweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["candidate_focal", "mse"])
        for f, e in zip(result.candidates, result.mses):
            writer.writerow([repr(float(f)), repr(float(e))])


def jitter_focal(focal: float, magnitude: float, seed) -> float:
    """``focal`` plus a uniform draw from ``[-magnitude, magnitude]``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if magnitude < 0:
        raise InvalidParameterError("jitter magnitude must be non-negative")
    if magnitude == 0:
        return float(focal)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return float(focal + rng.uniform(-magnitude, magnitude))
