"""Differentiable Gaussian splatting and a reference triangle rasterizer.

Gaussians are projected with the EWA linearization, sorted by camera-space
depth of their centers (ties by index), binned into square pixel tiles and
alpha-composited front to back. ``render_backward`` is the exact
vector-Jacobian product of ``render``.

The forward pass makes three discrete choices: which points are culled or
fall outside their 3-sigma footprint, the depth order, and where the
per-splat opacity hits its 0.999 clamp. All three are taken from a *gate*
cloud, which defaults to the cloud being rendered. Passing a fixed gate
turns ``render`` into a smooth function of the cloud, which is what a
finite-difference check needs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidParameterError
from .scene import (Camera, GaussianCloud, ImageBuffer, TriMesh, check_cloud, check_mesh,
                    normalize_quats, normalize_vjp, quat_to_rotmat, rotmat_vjp, sigmoid)

DILATION = 0.3
CUTOFF_SIGMA = 3.0
MAX_ETA = 0.999
TILE_SIZE = 4
# upper bound on tile*pixel*point entries materialized at once
_CHUNK_ELEMENTS = 1 << 21
_CHUNK_TILES = 8


class Splat2D(NamedTuple):
    mean: np.ndarray
    conic: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass
class RenderGrads:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray

    FIELDS = GaussianCloud.FIELDS

    @classmethod
    def zeros_like(cls, cloud):
        return cls(*(np.zeros_like(getattr(cloud, f)) for f in cls.FIELDS))

    def __iadd__(self, other):
        for f in self.FIELDS:
            getattr(self, f).__iadd__(getattr(other, f))
        return self

    def scaled(self, k):
        return RenderGrads(*(k * getattr(self, f) for f in self.FIELDS))

    def as_dict(self):
        return {f: getattr(self, f) for f in self.FIELDS}

    def is_finite(self):
        return all(np.all(np.isfinite(getattr(self, f))) for f in self.FIELDS)


def _jacobian(t, focal):
    tx, ty, tz = t[..., 0], t[..., 1], t[..., 2]
    jac = np.zeros(t.shape[:-1] + (2, 3))
    jac[..., 0, 0] = focal / tz
    jac[..., 1, 1] = focal / tz
    jac[..., 0, 2] = -focal * tx / tz ** 2
    jac[..., 1, 2] = -focal * ty / tz ** 2
    return jac


def project_gaussian(mean, covariance, camera: Camera):
    """Project one 3D Gaussian; returns a :class:`Splat2D` or ``None`` if culled.

    Color and opacity are not known here and are left as zero.
    """
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(covariance, dtype=np.float64)
    t = camera.rotation @ mean + camera.translation
    if t[2] <= camera.z_near:
        return None
    jac = _jacobian(t, camera.focal)
    cov2d = jac @ camera.rotation @ cov @ camera.rotation.T @ jac.T + DILATION * np.eye(2)
    inv = np.linalg.inv(cov2d)
    uv = np.array([camera.focal * t[0] / t[2] + camera.cx, camera.focal * t[1] / t[2] + camera.cy])
    return Splat2D(uv, np.array([inv[0, 0], inv[0, 1], inv[1, 1]]), float(t[2]), np.zeros(3), 0.0)


class _Projection(NamedTuple):
    q_unit: np.ndarray
    rot: np.ndarray
    scales: np.ndarray
    t: np.ndarray
    jac: np.ndarray
    view_cov: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    means2d: np.ndarray
    valid: np.ndarray
    radius: np.ndarray
    colors: np.ndarray
    alpha: np.ndarray


def _project_all(cloud: GaussianCloud, camera: Camera) -> _Projection:
    n = cloud.count
    q_unit = normalize_quats(cloud.rotations) if n else np.zeros((0, 4))
    rot = quat_to_rotmat(q_unit)
    scales = np.exp(cloud.log_scales)
    m = rot * scales[:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)
    w = camera.rotation
    t = cloud.positions @ w.T + camera.translation
    valid = t[:, 2] > camera.z_near
    tz = np.where(valid, t[:, 2], 1.0)
    t_safe = np.concatenate([t[:, :2], tz[:, None]], axis=1)
    jac = _jacobian(t_safe, camera.focal)
    view_cov = w @ cov3d @ w.T
    cov2d = jac @ view_cov @ np.swapaxes(jac, 1, 2) + DILATION * np.eye(2)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    means2d = camera.focal * t_safe[:, :2] / tz[:, None] + np.array([camera.cx, camera.cy])
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = CUTOFF_SIGMA * np.sqrt(lam_max)
    return _Projection(q_unit, rot, scales, t_safe, jac, view_cov, cov2d, conic, means2d, valid,
                       radius, np.clip(cloud.colors, 0.0, 1.0), sigmoid(cloud.opacity_logits))


class _Binning(NamedTuple):
    tile_ids: np.ndarray      # (T,) flat ids of non-empty tiles, ordered by point count
    point_idx: np.ndarray     # (T, K) point indices in blend order, -1 padded
    ntx: int
    nty: int
    counts: np.ndarray        # (T,) non-padded entries per tile


def _bin_tiles(proj: _Projection, height, width, tile_size=TILE_SIZE) -> _Binning:
    ntx = -(-width // tile_size)
    nty = -(-height // tile_size)
    n = len(proj.valid)
    order = np.lexsort((np.arange(n), proj.t[:, 2]))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)

    mx, my, r = proj.means2d[:, 0], proj.means2d[:, 1], proj.radius
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.ceil(mx - r), 0, width - 1)
        x1 = np.clip(np.floor(mx + r), 0, width - 1)
        y0 = np.clip(np.ceil(my - r), 0, height - 1)
        y1 = np.clip(np.floor(my + r), 0, height - 1)
        keep = proj.valid & np.isfinite(r) & (mx + r >= 0) & (mx - r <= width - 1) \
            & (my + r >= 0) & (my - r <= height - 1) & (x0 <= x1) & (y0 <= y1)
    pts = np.flatnonzero(keep)
    if pts.size == 0:
        return _Binning(np.zeros(0, dtype=np.int64), np.zeros((0, 0), dtype=np.int64), ntx, nty,
                        np.zeros(0, dtype=np.int64))
    tx0 = (x0[pts] // tile_size).astype(np.int64)
    tx1 = (x1[pts] // tile_size).astype(np.int64)
    ty0 = (y0[pts] // tile_size).astype(np.int64)
    ty1 = (y1[pts] // tile_size).astype(np.int64)
    nx = tx1 - tx0 + 1
    counts = nx * (ty1 - ty0 + 1)
    owner = np.repeat(np.arange(pts.size), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tile = (ty0[owner] + local // nx[owner]) * ntx + tx0[owner] + local % nx[owner]
    point = pts[owner]
    srt = np.lexsort((rank[point], tile))
    tile, point = tile[srt], point[srt]
    tile_ids, start, per_tile = np.unique(tile, return_index=True, return_counts=True)
    slot = np.arange(tile.size) - np.repeat(start, per_tile)
    row = np.repeat(np.arange(tile_ids.size), per_tile)
    idx = np.full((tile_ids.size, per_tile.max()), -1, dtype=np.int64)
    idx[row, slot] = point
    # grouping tiles of similar load keeps the per-chunk padding small
    by_load = np.argsort(per_tile, kind="stable")
    return _Binning(tile_ids[by_load], idx[by_load], ntx, nty, per_tile[by_load])


def _tile_pixels(tile_ids, ntx, height, width, tile_size=TILE_SIZE):
    ty, tx = np.divmod(tile_ids, ntx)
    ly, lx = np.divmod(np.arange(tile_size * tile_size), tile_size)
    px = tx[:, None] * tile_size + lx[None, :]
    py = ty[:, None] * tile_size + ly[None, :]
    inside = (px < width) & (py < height)
    return px.astype(np.float64), py.astype(np.float64), inside


def _chunks(binning: _Binning, tile_size=TILE_SIZE):
    """Yield ``(tile_ids, point_idx)`` batches, each trimmed to its own widest tile."""
    n_tiles = len(binning.tile_ids)
    s = 0
    while s < n_tiles:
        e = min(s + _CHUNK_TILES, n_tiles)
        k = max(int(binning.counts[e - 1]), 1)
        e = min(e, s + max(1, _CHUNK_ELEMENTS // (tile_size * tile_size * k)))
        k = max(int(binning.counts[e - 1]), 1)
        yield binning.tile_ids[s:e], binning.point_idx[s:e, :k]
        s = e


def _footprint(proj, gate, idx, px, py):
    """Per (tile, pixel, slot) quantities needed by both passes."""
    pad = idx < 0
    safe = np.where(pad, 0, idx)
    dx = px[:, :, None] - proj.means2d[safe, 0][:, None, :]
    dy = py[:, :, None] - proj.means2d[safe, 1][:, None, :]
    ca, cb, cc = (proj.conic[safe, i][:, None, :] for i in range(3))
    power = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    if gate is proj:
        gpower = power
    else:
        gdx = px[:, :, None] - gate.means2d[safe, 0][:, None, :]
        gdy = py[:, :, None] - gate.means2d[safe, 1][:, None, :]
        ga, gb, gc = (gate.conic[safe, i][:, None, :] for i in range(3))
        gpower = ga * gdx * gdx + 2.0 * gb * gdx * gdy + gc * gdy * gdy
    support = (gpower <= CUTOFF_SIGMA ** 2) & ~pad[:, None, :]
    gauss = np.exp(-0.5 * power)
    clamped = support & (gate.alpha[safe][:, None, :] * np.exp(-0.5 * gpower) > MAX_ETA)
    eta = np.where(support, np.where(clamped, MAX_ETA, proj.alpha[safe][:, None, :] * gauss), 0.0)
    return safe, pad, dx, dy, gauss, support & ~clamped, eta


def _transmittance(eta):
    one_minus = 1.0 - eta
    trans = np.cumprod(one_minus, axis=2)
    before = np.concatenate([np.ones(trans.shape[:2] + (1,)), trans[:, :, :-1]], axis=2)
    return before, trans[:, :, -1]


def _prepare(cloud, camera, gate):
    check_cloud(cloud)
    proj = _project_all(cloud, camera)
    if gate is None or gate is cloud:
        gproj = proj
    else:
        if gate.count != cloud.count:
            raise InvalidParameterError("gate cloud must have the same number of points")
        gproj = _project_all(gate, camera)
    return proj, gproj, _bin_tiles(gproj, camera.height, camera.width)


def render(cloud: GaussianCloud, camera: Camera, background=(0.0, 0.0, 0.0), *,
           gate: GaussianCloud | None = None) -> ImageBuffer:
    """Alpha-composite ``cloud`` as seen from ``camera``.

    Returns the RGB image and the accumulated opacity ``1 - prod(1 - eta)``.
    """
    bg = np.asarray(background, dtype=np.float64)
    h, w = camera.shape
    proj, gproj, binning = _prepare(cloud, camera, gate)
    rgb = np.broadcast_to(bg, (h, w, 3)).copy()
    alpha = np.zeros((h, w))
    for ids, idx in _chunks(binning):
        px, py, inside = _tile_pixels(ids, binning.ntx, h, w)
        safe, pad, _, _, _, _, eta = _footprint(proj, gproj, idx, px, py)
        before, final = _transmittance(eta)
        weight = eta * before
        color = np.einsum("tpk,tkc->tpc", weight, proj.colors[safe]) + final[..., None] * bg
        pyi, pxi = py[inside].astype(np.int64), px[inside].astype(np.int64)
        rgb[pyi, pxi] = color[inside]
        alpha[pyi, pxi] = 1.0 - final[inside]
    return ImageBuffer(rgb, alpha)


def render_backward(cloud: GaussianCloud, camera: Camera, background, grad_rgb, grad_alpha=None, *,
                    gate: GaussianCloud | None = None) -> RenderGrads:
    """Vector-Jacobian product of :func:`render` for per-pixel RGB and alpha gradients."""
    h, w = camera.shape
    grad_rgb = np.asarray(grad_rgb, dtype=np.float64)
    if grad_rgb.shape != (h, w, 3):
        raise InvalidParameterError(f"upstream rgb gradient has shape {grad_rgb.shape}, camera expects {(h, w, 3)}")
    if grad_alpha is None:
        grad_alpha = np.zeros((h, w))
    grad_alpha = np.asarray(grad_alpha, dtype=np.float64)
    if grad_alpha.shape != (h, w):
        raise InvalidParameterError(f"upstream alpha gradient has shape {grad_alpha.shape}, camera expects {(h, w)}")
    bg = np.asarray(background, dtype=np.float64)
    proj, gproj, binning = _prepare(cloud, camera, gate)
    n = cloud.count

    g_color = np.zeros((n, 3))
    g_alpha = np.zeros(n)
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    for ids, idx in _chunks(binning):
        px, py, inside = _tile_pixels(ids, binning.ntx, h, w)
        pyi = np.where(inside, py, 0).astype(np.int64)
        pxi = np.where(inside, px, 0).astype(np.int64)
        g_c = np.where(inside[..., None], grad_rgb[pyi, pxi], 0.0)
        g_a = np.where(inside, grad_alpha[pyi, pxi], 0.0)

        safe, pad, dx, dy, gauss, live, eta = _footprint(proj, gproj, idx, px, py)
        before, final = _transmittance(eta)
        weight = eta * before
        colors = proj.colors[safe]
        flat = safe[~pad]

        gw = np.einsum("tpc,tkc->tpk", g_c, colors)
        col_sum = np.einsum("tpk,tpc->tkc", weight, g_c)[~pad]
        for ch in range(3):
            g_color[:, ch] += np.bincount(flat, col_sum[:, ch], minlength=n)
        # suffix[k] = sum_{i>k} color_i weight_i + bg * final, projected onto upstream
        contrib = gw * weight
        suffix = np.cumsum(contrib[:, :, ::-1], axis=2)[:, :, ::-1] - contrib
        suffix += (np.einsum("tpc,c->tp", g_c, bg) - g_a)[..., None] * final[..., None]
        g_eta = np.where(live, before * gw - suffix / (1.0 - eta), 0.0)

        g_alpha += np.bincount(flat, (g_eta * gauss).sum(axis=1)[~pad], minlength=n)
        g_pow = -0.5 * g_eta * eta
        for col, vals in ((0, g_pow * dx * dx), (1, g_pow * 2.0 * dx * dy), (2, g_pow * dy * dy)):
            g_conic[:, col] += np.bincount(flat, vals.sum(axis=1)[~pad], minlength=n)
        ca, cb, cc = (proj.conic[safe, i][:, None, :] for i in range(3))
        g_mean2d[:, 0] += np.bincount(flat, (-2.0 * g_pow * (ca * dx + cb * dy)).sum(axis=1)[~pad], minlength=n)
        g_mean2d[:, 1] += np.bincount(flat, (-2.0 * g_pow * (cb * dx + cc * dy)).sum(axis=1)[~pad], minlength=n)

    return _projection_backward(cloud, camera, proj, g_color, g_alpha, g_mean2d, g_conic)


def _projection_backward(cloud, camera, proj, g_color, g_alpha, g_mean2d, g_conic):
    valid = proj.valid[:, None]
    colors = cloud.colors
    g_color = np.where((colors >= 0.0) & (colors <= 1.0), g_color, 0.0)
    g_logit = g_alpha * proj.alpha * (1.0 - proj.alpha)

    # conic = inverse(cov2d)
    g_q = np.empty((len(g_conic), 2, 2))
    g_q[:, 0, 0] = g_conic[:, 0]
    g_q[:, 0, 1] = g_q[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_q[:, 1, 1] = g_conic[:, 2]
    inv = np.empty_like(g_q)
    inv[:, 0, 0], inv[:, 0, 1], inv[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    inv[:, 1, 0] = inv[:, 0, 1]
    g_cov2d = -inv @ g_q @ inv

    jac, view_cov = proj.jac, proj.view_cov
    jac_t = np.swapaxes(jac, 1, 2)
    g_view = jac_t @ g_cov2d @ jac
    g_jac = 2.0 * g_cov2d @ jac @ view_cov
    w = camera.rotation
    g_cov3d = w.T @ g_view @ w
    m = proj.rot * proj.scales[:, None, :]
    g_m = 2.0 * g_cov3d @ m
    g_log_scale = np.einsum("nij,nij->nj", g_m, proj.rot) * proj.scales
    g_rot = g_m * proj.scales[:, None, :]
    g_rotation = normalize_vjp(cloud.rotations, rotmat_vjp(proj.q_unit, g_rot)) if len(g_rot) else np.zeros((0, 4))

    f = camera.focal
    tx, ty, tz = proj.t[:, 0], proj.t[:, 1], proj.t[:, 2]
    g_t = np.einsum("nij,ni->nj", jac, g_mean2d)
    g_t[:, 0] += g_jac[:, 0, 2] * (-f / tz ** 2)
    g_t[:, 1] += g_jac[:, 1, 2] * (-f / tz ** 2)
    g_t[:, 2] += (g_jac[:, 0, 0] + g_jac[:, 1, 1]) * (-f / tz ** 2) \
        + g_jac[:, 0, 2] * (2.0 * f * tx / tz ** 3) + g_jac[:, 1, 2] * (2.0 * f * ty / tz ** 3)
    g_pos = g_t @ w

    return RenderGrads(
        np.where(valid, g_pos, 0.0),
        np.where(valid, g_rotation, 0.0),
        np.where(valid, g_log_scale, 0.0),
        np.where(valid, g_color, 0.0),
        np.where(proj.valid, g_logit, 0.0),
    )


def render_mesh(mesh: TriMesh, camera: Camera, background=(0.0, 0.0, 0.0)) -> ImageBuffer:
    """Z-buffered rasterization with perspective-correct vertex-color interpolation.

    Pixel centers on a triangle edge count as covered; depth ties go to the
    lower face index. Triangles with any vertex in front of the near plane
    are dropped.
    """
    h, w = camera.shape
    bg = np.asarray(background, dtype=np.float64)
    out = ImageBuffer.filled(h, w, bg, 0.0)
    if mesh.is_empty:
        return out
    check_mesh(mesh)
    cam_v = mesh.vertices @ camera.rotation.T + camera.translation
    z = cam_v[:, 2]
    tri = mesh.faces[np.all(z[mesh.faces] > camera.z_near, axis=1)]
    if len(tri) == 0:
        return out
    zs = np.where(z > camera.z_near, z, 1.0)
    uv = camera.focal * cam_v[:, :2] / zs[:, None] + np.array([camera.cx, camera.cy])
    p = uv[tri]
    area = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) \
        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1])
    x0 = np.clip(np.ceil(p[:, :, 0].min(axis=1)), 0, w)
    x1 = np.clip(np.floor(p[:, :, 0].max(axis=1)), -1, w - 1)
    y0 = np.clip(np.ceil(p[:, :, 1].min(axis=1)), 0, h)
    y1 = np.clip(np.floor(p[:, :, 1].max(axis=1)), -1, h - 1)
    keep = (np.abs(area) > 1e-12) & (x1 >= x0) & (y1 >= y0)
    face_ids = np.flatnonzero(keep)
    if face_ids.size == 0:
        return out
    nx = (x1 - x0 + 1).astype(np.int64)[face_ids]
    ny = (y1 - y0 + 1).astype(np.int64)[face_ids]
    counts = nx * ny
    owner = np.repeat(np.arange(face_ids.size), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    fid = face_ids[owner]
    qx = x0[fid] + local % nx[owner]
    qy = y0[fid] + local // nx[owner]

    a, b, c = p[fid, 0], p[fid, 1], p[fid, 2]
    inv_area = 1.0 / area[fid]
    l0 = ((b[:, 0] - qx) * (c[:, 1] - qy) - (c[:, 0] - qx) * (b[:, 1] - qy)) * inv_area
    l1 = ((c[:, 0] - qx) * (a[:, 1] - qy) - (a[:, 0] - qx) * (c[:, 1] - qy)) * inv_area
    l2 = 1.0 - l0 - l1
    hit = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    fid, qx, qy = fid[hit], qx[hit].astype(np.int64), qy[hit].astype(np.int64)
    bary = np.stack([l0[hit], l1[hit], l2[hit]], axis=1)
    verts = tri[fid]
    inv_z = bary / zs[verts]
    inv_depth = inv_z.sum(axis=1)
    pixel = qy * w + qx
    order = np.lexsort((fid, -inv_depth, pixel))
    pixel, first = np.unique(pixel[order], return_index=True)
    sel = order[first]
    persp = inv_z[sel] / inv_depth[sel, None]
    color = np.einsum("nk,nkc->nc", persp, mesh.colors[verts[sel]])
    rgb = out.rgb.reshape(-1, 3)
    alpha = out.alpha.reshape(-1)
    rgb[pixel] = color
    alpha[pixel] = 1.0
    return out
