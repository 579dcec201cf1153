"""Scikit-learn style wrappers around the focal sweep and the two-stage fit.

``X`` is the anchor clip (a VideoClip, a list of images or a ``(T, H, W, C)``
array) and ``y`` the mesh per frame, mirroring how the CLI consumes frames
and meshes.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .config import FocalConfig, RunConfig
from .focal import FocalSweepConfig, sweep_focal
from .pipeline import dynamic_stage, front_camera, psnr, render_frames, resolve_focals, static_stage
from .render import render_mesh
from .validation import as_clip, as_meshes, check_times


class FocalAligner(BaseEstimator):
    """Pick the focal whose front-view mesh render best matches the first frame."""

    def __init__(self, initial_focal=None, offset_min=-64.0, offset_max=64.0, count=33,
                 coarse_to_fine=False, camera_radius=3.0, background=(0.0, 0.0, 0.0)):
        self.initial_focal = initial_focal
        self.offset_min = offset_min
        self.offset_max = offset_max
        self.count = count
        self.coarse_to_fine = coarse_to_fine
        self.camera_radius = camera_radius
        self.background = background

    def _camera(self, height, width, focal):
        cfg = RunConfig(height=height, width=width, camera_radius=self.camera_radius)
        return front_camera(cfg, focal)

    def fit(self, X, y):
        clip = as_clip(X)
        mesh = as_meshes(y, len(clip))[0]
        h, w = clip.shape
        f0 = float(w if self.initial_focal is None else self.initial_focal)
        cfg = FocalSweepConfig(f0, self.offset_min, self.offset_max, self.count,
                               self._camera(h, w, max(f0, 1.0)), self.coarse_to_fine)
        result = sweep_focal(mesh, clip[0], cfg, self.background)
        self.focal_ = result.focal
        self.candidates_ = result.candidates
        self.mses_ = result.mses
        self.image_shape_ = (h, w)
        return self

    def predict(self, y):
        """Front-view render of each mesh at the recovered focal."""
        check_is_fitted(self, "focal_")
        meshes = as_meshes(y, 1) if not isinstance(y, (list, tuple)) else list(y)
        cam = self._camera(*self.image_shape_, self.focal_)
        return [render_mesh(m, cam, self.background) for m in meshes]

    def score(self, X, y):
        """Negative MSE between the first frame and the aligned render."""
        clip = as_clip(X)
        pred = self.predict(as_meshes(y, len(clip))[:1])[0]
        return -float(np.mean((pred.rgb - clip[0].rgb) ** 2))


class PixelAligned4D(BaseEstimator):
    """Static then dynamic alignment of a Gaussian cloud to an anchor clip.

    ``config`` supplies every default; the remaining arguments override the
    corresponding fields when not ``None``.
    """

    def __init__(self, config=None, static_iters=None, dynamic_iters=None, seed=None, oracle=None,
                 focal=None):
        self.config = config
        self.static_iters = static_iters
        self.dynamic_iters = dynamic_iters
        self.seed = seed
        self.oracle = oracle
        self.focal = focal

    def _resolved_config(self, shape, n_frames):
        cfg = self.config if self.config is not None else RunConfig()
        if isinstance(cfg, dict):
            cfg = RunConfig.from_dict(cfg)
        changes = {"height": shape[0], "width": shape[1], "n_frames": n_frames}
        for name in ("static_iters", "dynamic_iters", "seed", "oracle"):
            value = getattr(self, name)
            if value is not None:
                changes[name] = value
        if self.focal is not None:
            changes["focal"] = FocalConfig(**{**cfg.focal.__dict__, "fixed_focal": float(self.focal)})
        return cfg.updated(**changes)

    def fit(self, X, y):
        clip = as_clip(X)
        meshes = as_meshes(y, len(clip))
        cfg = self._resolved_config(clip.shape, len(clip))
        focals = resolve_focals(clip, meshes, cfg)
        cloud, static_report = static_stage(clip, meshes, cfg, focals=focals)
        field, dynamic_report = dynamic_stage(cloud, clip, cfg, focals=focals)
        self.config_ = cfg
        self.cloud_ = cloud
        self.field_ = field
        self.focal_ = focals[0]
        self.focals_ = focals
        self.static_report_ = static_report
        self.dynamic_report_ = dynamic_report
        return self

    def predict(self, times, camera=None):
        """Renders of the deformed cloud at each normalized time (front view by default)."""
        check_is_fitted(self, "field_")
        view = camera if camera is not None else front_camera(self.config_, self.focal_)
        return render_frames(self.cloud_, self.field_, self.config_, view, check_times(times))

    def score(self, X, y=None):
        """Mean front-view PSNR against the frames of ``X``."""
        clip = as_clip(X)
        renders = self.predict(clip.times)
        return float(np.mean([psnr(a, b) for a, b in zip(renders, clip.frames)]))


__all__ = ["FocalAligner", "PixelAligned4D", "NotFittedError"]
