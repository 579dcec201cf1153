"""Scene data types, their invariants, and covariance construction.

Quaternions are stored ``(w, x, y, z)``. Scales are stored as logarithms and
opacities as logits so that unconstrained optimizer steps keep every point
valid. Cameras follow the OpenCV convention: ``x_cam = R @ x_world + t``,
camera looks down ``+z``, image ``y`` grows downward, and pixel centers sit
at integer coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import InvalidParameterError

QUAT_TOL = 1e-6
ROTATION_TOL = 1e-6


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def quat_to_rotmat(q):
    """Rotation matrices for quaternions of shape ``(..., 4)``.

    The polynomial form is used as-is, so ``q`` must already be unit norm.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_vjp(q, grad_r):
    """Gradient of ``quat_to_rotmat`` with respect to ``q`` given ``dL/dR``."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = grad_r
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1]
              - 2 * x * g[..., 1, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1]
              - 2 * y * g[..., 0, 0] - 2 * y * g[..., 2, 2])
    gz = 2 * (-w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1]
              - 2 * z * g[..., 0, 0] - 2 * z * g[..., 1, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def quat_multiply(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def normalize_quats(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def normalize_vjp(v, grad_out):
    """Gradient of ``v / |v|`` along the last axis."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / norm
    return (grad_out - u * np.sum(u * grad_out, axis=-1, keepdims=True)) / norm


def covariance_of(rotation, log_scale):
    """Covariance ``R diag(exp(2 s)) R^T`` of one Gaussian.

    >>> covariance_of([1, 0, 0, 0], [np.log(2), 0, 0]).diagonal()
    array([4., 1., 1.])
    """
    q = np.asarray(rotation, dtype=np.float64)
    s = np.asarray(log_scale, dtype=np.float64)
    if q.shape != (4,) or s.shape != (3,):
        raise InvalidParameterError("expected a 4-vector quaternion and a 3-vector log-scale")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(s))):
        raise InvalidParameterError("covariance_of received non-finite input")
    if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
        raise InvalidParameterError(f"quaternion is not unit norm (|q| = {np.linalg.norm(q):.9f})")
    return covariances(q[None], s[None])[0]


def covariances(rotations, log_scales):
    r = quat_to_rotmat(rotations)
    m = r * np.exp(log_scales)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


@dataclass(frozen=True)
class GaussianCloud:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray

    FIELDS = ("positions", "rotations", "log_scales", "colors", "opacity_logits")

    def __post_init__(self):
        for name in self.FIELDS:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def __len__(self):
        return self.count

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros((0, 3)), np.zeros(0))

    def replace(self, **changes) -> "GaussianCloud":
        return replace(self, **changes)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).copy() for f in self.FIELDS))

    def as_dict(self):
        return {f: getattr(self, f) for f in self.FIELDS}


class Violation(NamedTuple):
    index: int | None
    field: str
    message: str

    def __str__(self):
        where = "" if self.index is None else f"[{self.index}]"
        return f"{self.field}{where}: {self.message}"


_EXPECTED_WIDTH = {"positions": 3, "rotations": 4, "log_scales": 3, "colors": 3}


def validate_cloud(cloud: GaussianCloud) -> list[Violation]:
    """List every broken invariant of ``cloud``; empty when the cloud is valid."""
    out: list[Violation] = []
    n = cloud.positions.shape[0] if cloud.positions.ndim == 2 else -1
    for name, width in _EXPECTED_WIDTH.items():
        arr = getattr(cloud, name)
        if arr.ndim != 2 or arr.shape != (max(n, 0), width):
            out.append(Violation(None, name, f"shape {arr.shape}, expected ({n}, {width})"))
    if cloud.opacity_logits.shape != (max(n, 0),):
        out.append(Violation(None, "opacity_logits", f"shape {cloud.opacity_logits.shape}, expected ({n},)"))
    if out or n == 0:
        return out

    for name in GaussianCloud.FIELDS:
        arr = getattr(cloud, name)
        bad = ~np.isfinite(arr.reshape(n, -1)).all(axis=1)
        out.extend(Violation(int(i), name, "non-finite value") for i in np.flatnonzero(bad))

    norms = np.linalg.norm(cloud.rotations, axis=1)
    bad = np.isfinite(norms) & (np.abs(norms - 1.0) > QUAT_TOL)
    out.extend(Violation(int(i), "rotations", f"norm {norms[i]:.9g} is not 1") for i in np.flatnonzero(bad))

    with np.errstate(over="ignore"):
        scales = np.exp(cloud.log_scales)
    bad = np.isfinite(cloud.log_scales).all(axis=1) & ~((scales > 0) & np.isfinite(scales)).all(axis=1)
    out.extend(Violation(int(i), "log_scales", "exp(log_scale) not positive and finite") for i in np.flatnonzero(bad))

    alpha = sigmoid(cloud.opacity_logits)
    bad = np.isfinite(cloud.opacity_logits) & ~((alpha > 0) & (alpha < 1))
    out.extend(Violation(int(i), "opacity_logits", "opacity saturates to 0 or 1") for i in np.flatnonzero(bad))
    return out


def check_cloud(cloud: GaussianCloud) -> GaussianCloud:
    problems = validate_cloud(cloud)
    if problems:
        shown = "; ".join(str(p) for p in problems[:5])
        raise InvalidParameterError(f"invalid GaussianCloud ({len(problems)} violations): {shown}")
    return cloud


@dataclass(frozen=True)
class Camera:
    focal: float
    cx: float
    cy: float
    height: int
    width: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    z_near: float = 0.01

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise InvalidParameterError("camera rotation must be 3x3 and translation a 3-vector")
        if not (np.isfinite(self.focal) and self.focal > 0):
            raise InvalidParameterError(f"camera focal must be positive, got {self.focal}")
        if not self.z_near > 0:
            raise InvalidParameterError(f"z_near must be positive, got {self.z_near}")
        if int(self.height) < 1 or int(self.width) < 1:
            raise InvalidParameterError("image size must be at least 1x1")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=ROTATION_TOL, rtol=0):
            raise InvalidParameterError("camera rotation is not orthonormal")

    @property
    def shape(self):
        return (int(self.height), int(self.width))

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def with_focal(self, focal: float) -> "Camera":
        return replace(self, focal=float(focal))

    @classmethod
    def look_at(cls, eye, target, focal, height, width, up=(0.0, 1.0, 0.0), z_near=0.01,
                cx=None, cy=None):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(float(focal), width / 2.0 if cx is None else cx, height / 2.0 if cy is None else cy,
                   int(height), int(width), rot, -rot @ eye, z_near)

    @classmethod
    def orbit(cls, azimuth_deg, elevation_deg, radius, focal, height, width,
              target=(0.0, 0.0, 0.0), z_near=0.01):
        """Camera on a sphere around ``target``; azimuth 0, elevation 0 is the front (+z) view."""
        az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
        offset = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        return cls.look_at(np.asarray(target) + offset, target, focal, height, width, z_near=z_near)


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        colors = np.asarray(self.colors, dtype=np.float64)
        if colors.size == 0 and len(self.vertices):
            colors = np.full((len(self.vertices), 3), 0.5)
        object.__setattr__(self, "colors", colors.reshape(-1, 3))

    @property
    def is_empty(self):
        return len(self.faces) == 0

    def face_areas(self):
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def check_mesh(mesh: TriMesh, area_tol=1e-12) -> TriMesh:
    nv = len(mesh.vertices)
    if mesh.colors.shape != (nv, 3):
        raise InvalidParameterError(f"mesh colors shape {mesh.colors.shape}, expected ({nv}, 3)")
    if len(mesh.faces) and (mesh.faces.min() < 0 or mesh.faces.max() >= nv):
        raise InvalidParameterError("mesh face index out of range")
    if not np.all(np.isfinite(mesh.vertices)):
        raise InvalidParameterError("mesh has non-finite vertices")
    if len(mesh.faces):
        degenerate = np.flatnonzero(mesh.face_areas() <= area_tol)
        if degenerate.size:
            raise InvalidParameterError(f"mesh face {degenerate[0]} is degenerate")
    return mesh


@dataclass(frozen=True)
class ImageBuffer:
    rgb: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3 or alpha.shape != rgb.shape[:2]:
            raise InvalidParameterError(f"ImageBuffer expects HxWx3 rgb and HxW alpha, got {rgb.shape} and {alpha.shape}")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "alpha", alpha)

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def shape(self):
        return self.rgb.shape[:2]

    @classmethod
    def from_rgb(cls, rgb, alpha=None):
        rgb = np.asarray(rgb, dtype=np.float64)
        return cls(rgb, np.ones(rgb.shape[:2]) if alpha is None else alpha)

    @classmethod
    def filled(cls, height, width, color=(0.0, 0.0, 0.0), alpha=0.0):
        return cls(np.broadcast_to(np.asarray(color, dtype=np.float64), (height, width, 3)).copy(),
                   np.full((height, width), float(alpha)))

    def is_valid(self):
        return bool(np.all(np.isfinite(self.rgb)) and np.all(np.isfinite(self.alpha))
                    and self.alpha.min(initial=0) >= 0 and self.alpha.max(initial=0) <= 1)


@dataclass(frozen=True)
class VideoClip:
    frames: tuple

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise InvalidParameterError("a clip needs at least one frame")
        shape = frames[0].shape
        for i, fr in enumerate(frames):
            if fr.shape != shape:
                raise InvalidParameterError(f"frame {i} has size {fr.shape}, expected {shape}")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def shape(self):
        return self.frames[0].shape

    @property
    def times(self) -> np.ndarray:
        """Frame timestamps normalized to [0, 1]."""
        n = len(self.frames)
        return np.zeros(1) if n == 1 else np.arange(n) / (n - 1)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance-preserving cosine schedule, indexed by integer timestep."""

    t_max: int = 1000
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.t_max < 1:
            raise InvalidParameterError("t_max must be positive")
        w = np.ones(self.t_max + 1) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (self.t_max + 1,):
            raise InvalidParameterError(f"weights must have length t_max + 1 = {self.t_max + 1}")
        object.__setattr__(self, "weights", w)

    def _check(self, tau):
        if not 0 <= tau <= self.t_max:
            raise InvalidParameterError(f"timestep {tau} outside [0, {self.t_max}]")
        return tau

    def alpha(self, tau) -> float:
        return float(np.cos(0.5 * np.pi * self._check(tau) / self.t_max))

    def sigma(self, tau) -> float:
        return float(np.sin(0.5 * np.pi * self._check(tau) / self.t_max))

    def weight(self, tau) -> float:
        return float(self.weights[int(round(self._check(tau)))])

    def sample_tau(self, rng, low=0.02, high=0.98) -> int:
        return int(rng.integers(int(np.ceil(low * self.t_max)), int(np.floor(high * self.t_max)) + 1))
