"""Synthetic anchor videos with known geometry, motion and focal length."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .pipeline import front_camera, init_gaussians
from .render import render_mesh
from .scene import Camera, GaussianCloud, TriMesh, VideoClip


def icosphere(subdivisions=2, radius=1.0):
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache, new_faces = {}, []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts) * radius, np.array(faces, dtype=np.int64)


def limb(start, length, thickness, segments):
    """Box prism along +x, split into ``segments`` rings so it can bend."""
    h = thickness / 2.0
    square = np.array([(-h, -h), (h, -h), (h, h), (-h, h)])
    verts = []
    for s in range(segments + 1):
        x = start + length * s / segments
        verts += [(x, y, z) for y, z in square]
    faces = []
    for s in range(segments):
        a, b = 4 * s, 4 * (s + 1)
        for k in range(4):
            k2 = (k + 1) % 4
            faces += [(a + k, b + k, b + k2), (a + k, b + k2, a + k2)]
    last = 4 * segments
    faces += [(0, 2, 1), (0, 3, 2), (last, last + 1, last + 2), (last, last + 2, last + 3)]
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64)


@dataclass
class Motion:
    """Rigid yaw and bob of the whole object plus a bend of the limb."""

    pivot: float = 0.3
    limb_length: float = 0.55
    bend: float = 0.9
    yaw: float = 0.35
    bob: float = 0.08

    def __call__(self, points, on_limb, t):
        p = np.array(points, dtype=np.float64)
        u = np.clip((p[:, 0] - self.pivot) / self.limb_length, 0.0, 1.0) * on_limb
        angle = self.bend * np.sin(np.pi * t) * u
        c, s = np.cos(angle), np.sin(angle)
        dx, dy = p[:, 0] - self.pivot, p[:, 1]
        p[:, 0] = np.where(on_limb, self.pivot + c * dx - s * dy, p[:, 0])
        p[:, 1] = np.where(on_limb, s * dx + c * dy, p[:, 1])
        yaw = self.yaw * t
        cy, sy = np.cos(yaw), np.sin(yaw)
        x, z = p[:, 0].copy(), p[:, 2].copy()
        p[:, 0] = cy * x + sy * z
        p[:, 2] = -sy * x + cy * z
        p[:, 1] += self.bob * np.sin(2.0 * np.pi * t)
        return p


@dataclass
class SyntheticAnchor:
    clip: VideoClip
    meshes: list
    focal: float
    camera: Camera
    cloud: GaussianCloud
    motion: Motion
    on_limb: np.ndarray

    def mesh_at(self, t):
        base = self.meshes[0]
        return TriMesh(self.motion(base.vertices, self.on_limb, t), base.faces, base.colors)


def _texture(v):
    r = 0.55 + 0.35 * np.sin(3.0 * v[:, 0] + 1.0)
    g = 0.45 + 0.35 * np.cos(2.5 * v[:, 1] - 0.5)
    b = 0.5 + 0.3 * np.sin(2.0 * v[:, 2] + 2.0 * v[:, 0])
    return np.clip(np.stack([r, g, b], axis=1), 0.0, 1.0)


def synth_anchor(seed: int, cfg: RunConfig | None = None, focal: float | None = None,
                 gt_points: int = 6000) -> SyntheticAnchor:
    """Textured sphere with a bending limb, animated and rendered front-on.

    The true focal is drawn from ``[56, 88]`` px (scaled with image width)
    unless given.
    """
    cfg = cfg or RunConfig()
    rng = np.random.default_rng(seed)
    if focal is None:
        focal = float(rng.uniform(56.0, 88.0)) * cfg.width / 64.0
    body_v, body_f = icosphere(2, 0.45)
    limb_v, limb_f = limb(0.3, 0.55, 0.16, 6)
    verts = np.concatenate([body_v, limb_v])
    faces = np.concatenate([body_f, limb_f + len(body_v)])
    colors = _texture(verts)
    colors[len(body_v):] = [0.95, 0.55, 0.15]
    on_limb = np.zeros(len(verts), dtype=bool)
    on_limb[len(body_v):] = True
    base = TriMesh(verts, faces, colors)
    motion = Motion()
    cam = front_camera(cfg, focal)
    n_t = max(cfg.n_frames, 1)
    times = np.zeros(1) if n_t == 1 else np.arange(n_t) / (n_t - 1)
    meshes = [base] + [TriMesh(motion(verts, on_limb, t), faces, colors) for t in times[1:]]
    frames = tuple(render_mesh(m, cam, cfg.background) for m in meshes)
    gt = init_gaussians(None, base, cfg.updated(num_points=gt_points), np.random.default_rng(seed + 7))
    return SyntheticAnchor(VideoClip(frames), meshes, focal, cam, gt, motion, on_limb)
