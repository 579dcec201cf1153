"""Two-stage optimization: static alignment of the base cloud, then motion.

The static stage fits the base Gaussians to the first anchor frame (color,
mask and perceptual terms), to mesh renders from jittered random views, and
to an image-oracle SDS term. The dynamic stage freezes the base cloud and
fits the deformation field to every anchor frame, plus video- and
multiview-oracle refinement terms.

In mock mode the oracles are perfect denoisers. The image oracle targets
the first anchor frame. The video and multiview oracles target renders of
the frozen base cloud, so they carry no motion of their own.
"""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .config import RunConfig
from .deform import DeformationField, deform, deform_backward
from .errors import InvalidParameterError, OracleUnavailableError
from .focal import FocalSweepConfig, jitter_focal, sweep_focal, write_curve_csv
from .guidance import MockTargetOracle, RemoteOracle, mv_refine_loss, sds_gradient, time_refine_loss
from .io import read_frames, read_obj, write_png
from .losses import FeatureStack, geometry_alignment, mse_loss, motion_alignment, texture_alignment
from .optim import OptimizerState, adam_step
from .render import RenderGrads, render, render_backward, render_mesh
from .scene import Camera, DiffusionSchedule, GaussianCloud, ImageBuffer, TriMesh, VideoClip, check_mesh

STATIC_COLUMNS = ("iteration", "L_MSE", "L_Mask", "L_LPIPS", "L_TA", "L_GA", "L_T2I", "total")
DYNAMIC_COLUMNS = ("iteration", "L_MA", "L_Time", "L_MV", "total")


@dataclass
class StageReport:
    stage: str
    rows: list = field(default_factory=list)
    wall_clock: float = 0.0
    psnr: float | None = None
    focal: float | None = None

    @property
    def columns(self):
        return STATIC_COLUMNS if self.stage == "static" else DYNAMIC_COLUMNS

    def series(self, column):
        return np.array([r[column] for r in self.rows])


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    err = mse_loss(a, b).value
    return float("inf") if err == 0 else float(10.0 * np.log10(1.0 / err))


def cloud_digest(cloud: GaussianCloud) -> str:
    h = hashlib.sha256()
    for name in GaussianCloud.FIELDS:
        h.update(np.ascontiguousarray(getattr(cloud, name)).tobytes())
    return h.hexdigest()


def ingest_anchor(directory, cfg: RunConfig) -> VideoClip:
    return VideoClip(tuple(read_frames(directory, cfg.background)))


def ingest_meshes(directory, n_frames: int) -> list[TriMesh]:
    """Load ``mesh_%04d.obj`` per frame; a lone ``mesh_0000.obj`` is reused for every frame."""
    directory = Path(directory)
    first = directory / "mesh_0000.obj"
    if not first.exists():
        raise InvalidParameterError(f"{first} not found")
    if len(list(directory.glob("mesh_*.obj"))) == 1:
        return [read_obj(first)] * n_frames
    meshes = []
    for t in range(n_frames):
        p = directory / f"mesh_{t:04d}.obj"
        if not p.exists():
            raise InvalidParameterError(f"{p} not found (only some per-frame meshes are present)")
        meshes.append(read_obj(p))
    return meshes


def sample_surface(mesh: TriMesh, n: int, rng):
    """Area-weighted uniform samples; returns points, colors and face indices."""
    check_mesh(mesh)
    if mesh.is_empty:
        raise InvalidParameterError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    faces = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    tri = mesh.faces[faces]
    points = np.einsum("nk,nkc->nc", bary, mesh.vertices[tri])
    colors = np.einsum("nk,nkc->nc", bary, mesh.colors[tri])
    return points, np.clip(colors, 0.0, 1.0), faces


def init_gaussians(first_frame: ImageBuffer | None, mesh: TriMesh, cfg: RunConfig, rng=None) -> GaussianCloud:
    """Seed the base cloud on the mesh surface.

    Opacity starts at 0.5 and every point gets the same isotropic scale,
    the mean nearest-neighbor spacing of the samples.
    """
    if mesh.is_empty:
        raise InvalidParameterError("cannot initialize Gaussians from an empty mesh")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    n = cfg.num_points
    points, colors, _ = sample_surface(mesh, n, rng)
    if n > 1:
        dist, _ = cKDTree(points).query(points, k=2)
        spacing = float(np.mean(dist[:, 1]))
    else:
        spacing = 0.01
    spacing = max(spacing, 1e-4)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianCloud(points, rotations, np.full((n, 3), np.log(spacing)), colors, np.zeros(n))


def front_camera(cfg: RunConfig, focal: float) -> Camera:
    return Camera.orbit(0.0, 0.0, cfg.camera_radius, focal, cfg.height, cfg.width)


def random_view(cfg: RunConfig, focal: float, rng) -> Camera:
    """Orbit camera at the front camera's radius with a jittered focal."""
    az = rng.uniform(0.0, 360.0)
    el = rng.uniform(*cfg.elevation_range)
    return Camera.orbit(az, el, cfg.camera_radius, jitter_focal(focal, cfg.focal.jitter, rng), cfg.height, cfg.width)


def focal_sweep_config(cfg: RunConfig) -> FocalSweepConfig:
    fc = cfg.focal
    f0 = float(cfg.width) if fc.initial_focal is None else float(fc.initial_focal)
    return FocalSweepConfig(f0, fc.offset_min, fc.offset_max, fc.count, front_camera(cfg, max(f0, 1.0)),
                            fc.coarse_to_fine)


def resolve_focals(clip: VideoClip, meshes, cfg: RunConfig) -> list[float]:
    """One focal per frame: fixed, swept on frame 0 and shared, or swept per frame."""
    if cfg.focal.fixed_focal is not None:
        return [float(cfg.focal.fixed_focal)] * len(clip)
    sweep_cfg = focal_sweep_config(cfg)
    frames = range(len(clip)) if cfg.focal.per_frame else [0]
    found = []
    for t in frames:
        result = sweep_focal(meshes[t], clip[t], sweep_cfg, cfg.background)
        if cfg.focal.diagnostics and t == 0:
            write_curve_csv(result, cfg.focal.diagnostics)
        found.append(result.focal)
    return found if cfg.focal.per_frame else found * len(clip)


def make_oracle(cfg: RunConfig, kind: str, target=None, schedule=None):
    if cfg.oracle == "mock":
        return MockTargetOracle(target, schedule, kind)
    return RemoteOracle(cfg.oracle, kind)


def _schedule_tau(schedule, cfg, rng):
    return schedule.sample_tau(rng, *cfg.tau_range)


def _abort(stage, exc):
    raise OracleUnavailableError(f"{stage} stage aborted: {exc}", kind=exc.kind, endpoint=exc.endpoint,
                                 status=exc.status) from exc


def static_stage(clip: VideoClip, meshes, cfg: RunConfig, focals=None, cloud: GaussianCloud | None = None):
    """Optimize the base cloud; returns ``(cloud, StageReport)``."""
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    if clip.shape != (cfg.height, cfg.width):
        raise InvalidParameterError(f"clip frames are {clip.shape}, config expects {(cfg.height, cfg.width)}")
    focals = resolve_focals(clip, meshes, cfg) if focals is None else list(focals)
    anchor, mesh = clip[0], meshes[0]
    if cloud is None:
        cloud = init_gaussians(anchor, mesh, cfg, rng)
    bg = np.asarray(cfg.background, dtype=np.float64)
    cam = front_camera(cfg, focals[0])
    stack = FeatureStack(cfg.feature_seed)
    schedule = DiffusionSchedule()
    w = cfg.weights
    oracle = make_oracle(cfg, "image", anchor, schedule) if w.t2i else None
    params = cloud.as_dict()
    state = OptimizerState()
    rates = cfg.rates.cloud_rates()
    report = StageReport("static", focal=focals[0])
    npix = anchor.rgb.size

    for it in range(cfg.static_iters):
        x = render(cloud, cam, bg)
        ta = texture_alignment(x, anchor, w.lam, stack, w.mse, w.mask)
        g_rgb = w.ta * ta.rgb_grad
        g_alpha = w.ta * ta.alpha_grad
        l_t2i = 0.0
        if oracle is not None:
            tau = _schedule_tau(schedule, cfg, rng)
            eps = rng.standard_normal(x.rgb.shape)
            try:
                sds = sds_gradient(x, oracle, cfg.prompt, tau, eps, schedule)
            except OracleUnavailableError as exc:
                _abort("static", exc)
            l_t2i = float(np.sum(sds * sds)) / (schedule.weight(tau) or 1.0) / npix
            g_rgb = g_rgb + w.t2i * sds / npix
        grads = render_backward(cloud, cam, bg, g_rgb, g_alpha)

        l_ga, ga_terms = 0.0, {"mse": 0.0, "mask": 0.0, "lpips": 0.0}
        if w.ga and cfg.n_views:
            views = [random_view(cfg, focals[0], rng) for _ in range(cfg.n_views)]
            g_renders = [render(cloud, v, bg) for v in views]
            m_renders = [render_mesh(mesh, v, bg) for v in views]
            ga = geometry_alignment(g_renders, m_renders, w.lam, stack, w.mse, w.mask)
            l_ga, ga_terms = ga.value, ga.terms
            for v, gr, gal in zip(views, ga.rgb_grad, ga.alpha_grad):
                grads += render_backward(cloud, v, bg, w.ga * gr, w.ga * gal)

        total = w.ta * ta.value + w.ga * l_ga + w.t2i * l_t2i
        report.rows.append({"iteration": it, "L_MSE": ta.terms["mse"], "L_Mask": ta.terms["mask"],
                            "L_LPIPS": ta.terms["lpips"], "L_TA": ta.value, "L_GA": l_ga,
                            "L_T2I": l_t2i, "total": total})
        params, state = adam_step(params, grads.as_dict(), state, rates, cfg.beta1, cfg.beta2, cfg.adam_eps)
        cloud = GaussianCloud(**params)

    report.psnr = psnr(render(cloud, cam, bg), anchor)
    report.wall_clock = time.perf_counter() - start
    return cloud, report


def dynamic_stage(cloud: GaussianCloud, clip: VideoClip, cfg: RunConfig, focals=None,
                  field: DeformationField | None = None):
    """Optimize the deformation field with the base cloud frozen; returns ``(field, StageReport)``."""
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed + 1)
    n_t = len(clip)
    if focals is None:
        focals = [float(cfg.focal.fixed_focal or cfg.width)] * n_t
    elif np.isscalar(focals):
        focals = [float(focals)] * n_t
    if len(focals) != n_t:
        raise InvalidParameterError(f"{len(focals)} focals for {n_t} frames")
    if field is None:
        field = DeformationField.create(cfg.hidden, 2, cfg.pos_freqs, cfg.time_freqs, cfg.deform_opacity,
                                        seed=cfg.seed)
    bg = np.asarray(cfg.background, dtype=np.float64)
    times = clip.times
    fronts = [front_camera(cfg, f) for f in focals]
    schedule = DiffusionSchedule()
    w = cfg.weights
    params = field.params()
    state = OptimizerState()
    rates = {k: cfg.rates.field for k in params}
    report = StageReport("dynamic", focal=focals[0])
    npix = clip[0].rgb.size

    for it in range(cfg.dynamic_iters):
        field = field.with_params(params)
        clouds = [deform(cloud, float(t), field) for t in times]
        up = [RenderGrads.zeros_like(cloud) for _ in times]

        l_ma = 0.0
        if w.ma:
            renders = [render(c, cam, bg) for c, cam in zip(clouds, fronts)]
            ma = motion_alignment(renders, clip)
            l_ma = ma.value
            for k in range(n_t):
                up[k] += render_backward(clouds[k], fronts[k], bg, w.ma * ma.rgb_grad[k])
        else:
            l_ma = motion_alignment([render(c, cam, bg) for c, cam in zip(clouds, fronts)], clip).value

        l_time = 0.0
        if w.time:
            view = random_view(cfg, focals[0], rng)
            x = [render(c, view, bg) for c in clouds]
            oracle = make_oracle(cfg, "video", render(cloud, view, bg), schedule)
            tau = _schedule_tau(schedule, cfg, rng)
            eps = rng.standard_normal((n_t,) + x[0].rgb.shape)
            try:
                l_time, g = time_refine_loss(x, oracle, cfg.prompt, tau, eps, schedule)
            except OracleUnavailableError as exc:
                _abort("dynamic", exc)
            l_time /= npix
            for k in range(n_t):
                up[k] += render_backward(clouds[k], view, bg, w.time * g[k] / npix)

        l_mv = 0.0
        if w.mv and cfg.n_views:
            k = int(rng.integers(n_t))
            views = [random_view(cfg, focals[k], rng) for _ in range(cfg.n_views)]
            x = [render(clouds[k], v, bg) for v in views]
            oracle = make_oracle(cfg, "multiview", [render(cloud, v, bg) for v in views], schedule)
            tau = _schedule_tau(schedule, cfg, rng)
            eps = rng.standard_normal((len(views),) + x[0].rgb.shape)
            try:
                l_mv, g = mv_refine_loss(x, oracle, clip[k], tau, eps, schedule)
            except OracleUnavailableError as exc:
                _abort("dynamic", exc)
            l_mv /= npix
            for v, gv in zip(views, g):
                up[k] += render_backward(clouds[k], v, bg, w.mv * gv / npix)

        total = w.ma * l_ma + w.time * l_time + w.mv * l_mv
        report.rows.append({"iteration": it, "L_MA": l_ma, "L_Time": l_time, "L_MV": l_mv, "total": total})
        g_field = None
        for t, u in zip(times, up):
            fg, _ = deform_backward(cloud, float(t), field, u)
            d = fg.as_dict()
            g_field = d if g_field is None else {name: g_field[name] + d[name] for name in d}
        params, state = adam_step(params, g_field, state, rates, cfg.beta1, cfg.beta2, cfg.adam_eps)

    field = field.with_params(params)
    final = [render(deform(cloud, float(t), field), cam, bg) for t, cam in zip(times, fronts)]
    report.psnr = float(np.mean([psnr(a, b) for a, b in zip(final, clip.frames)]))
    report.wall_clock = time.perf_counter() - start
    return field, report


def render_frames(cloud, field, cfg: RunConfig, view: Camera, times) -> list[ImageBuffer]:
    bg = np.asarray(cfg.background, dtype=np.float64)
    return [render(cloud if field is None else deform(cloud, float(t), field), view, bg) for t in times]


def render_sequence(cloud, field, cfg: RunConfig, view: Camera, times, out_dir) -> list[Path]:
    """Write ``frame_%04d.png`` for each time, rendered from the deformed cloud."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(render_frames(cloud, field, cfg, view, times)):
        p = out_dir / f"frame_{i:04d}.png"
        write_png(img, p)
        paths.append(p)
    return paths
