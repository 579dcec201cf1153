"""Input coercion shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .errors import InvalidParameterError
from .scene import ImageBuffer, TriMesh, VideoClip


def as_image(x, name="image") -> ImageBuffer:
    """Accept an ImageBuffer, an ``(H, W, 3)`` RGB array or an ``(H, W, 4)`` RGBA array."""
    if isinstance(x, ImageBuffer):
        img = x
    else:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] not in (3, 4):
            raise InvalidParameterError(f"{name} must be HxWx3 or HxWx4, got shape {arr.shape}")
        img = ImageBuffer(arr[..., :3], arr[..., 3] if arr.shape[2] == 4 else np.ones(arr.shape[:2]))
    if not img.is_valid():
        raise InvalidParameterError(f"{name} has non-finite values or alpha outside [0, 1]")
    return img


def as_clip(x) -> VideoClip:
    """A VideoClip, a sequence of images, or a ``(T, H, W, C)`` array."""
    if isinstance(x, VideoClip):
        frames = x.frames
    elif isinstance(x, ImageBuffer):
        frames = (x,)
    else:
        frames = tuple(x)
    if not frames:
        raise InvalidParameterError("expected at least one frame")
    return VideoClip(tuple(as_image(f, f"frame {i}") for i, f in enumerate(frames)))


def as_meshes(y, n_frames: int) -> list[TriMesh]:
    """One mesh per frame; a single mesh is reused for all frames."""
    if isinstance(y, TriMesh):
        return [y] * n_frames
    meshes = list(y)
    if len(meshes) == 1:
        meshes = meshes * n_frames
    if len(meshes) != n_frames:
        raise InvalidParameterError(f"got {len(meshes)} meshes for {n_frames} frames")
    for i, m in enumerate(meshes):
        if not isinstance(m, TriMesh):
            raise InvalidParameterError(f"mesh {i} is {type(m).__name__}, expected TriMesh")
    return meshes


def check_times(times) -> np.ndarray:
    t = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if t.ndim != 1 or not np.all(np.isfinite(t)) or t.min() < 0.0 or t.max() > 1.0:
        raise InvalidParameterError("times must be finite values in [0, 1]")
    return t
