"""End-to-end acceptance checks, one verdict line per criterion.

Everything runs against the mock oracle. The desk-scale pipeline run is
shared by criteria 6 to 8 and takes several minutes.
"""
import csv
import json
import time

import numpy as np
import pytest

from splat_align import Camera, DiffusionSchedule, FeatureStack, GaussianCloud, ImageBuffer, MockTargetOracle, RunConfig
from splat_align.cli import main
from splat_align.config import LossWeights
from splat_align.deform import deform, deform_backward, load_field
from splat_align.focal import FocalSweepConfig, sweep_focal
from splat_align.guidance import distill_image, sds_gradient
from splat_align.io import read_ply, write_ply
from splat_align.losses import geometry_alignment, mask_loss, motion_alignment, mse_loss, perceptual_loss, \
    texture_alignment
from splat_align.pipeline import front_camera, render_frames, resolve_focals, static_stage
from splat_align.render import RenderGrads, render, render_backward, render_mesh
from splat_align.scene import VideoClip
from splat_align.synth import synth_anchor

from conftest import record
from oracles import brute_force_render, central_difference, random_cloud, relative_error

pytestmark = pytest.mark.slow


def test_criterion_1_tile_renderer_matches_brute_force():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 65))
        h, w = int(rng.integers(8, 49)), int(rng.integers(8, 49))
        cam = Camera.orbit(rng.uniform(0, 360), rng.uniform(-40, 40), 3.0, rng.uniform(0.6, 1.6) * w, h, w)
        cloud, bg = random_cloud(rng, n), rng.uniform(0, 1, 3)
        img = render(cloud, cam, bg)
        rgb, alpha = brute_force_render(cloud, cam, bg)
        worst = max(worst, np.abs(img.rgb - rgb).max(), np.abs(img.alpha - alpha).max())
    elapsed = time.perf_counter() - start
    ok = record(1, "tile renderer equals brute force on 200 scenes", worst <= 1e-6 and elapsed < 60,
                f"max diff {worst:.2e}, {elapsed:.1f} s")
    assert ok


def _render_fd(rng):
    n = int(rng.integers(2, 7))
    cloud = random_cloud(rng, n, logit_sd=1.0)
    cam = Camera.orbit(rng.uniform(0, 360), rng.uniform(-30, 30), 3.0, rng.uniform(14, 22), 14, 14)
    bg = rng.uniform(0, 1, 3)
    g_rgb, g_alpha = rng.normal(size=(14, 14, 3)), rng.normal(size=(14, 14))
    grads = render_backward(cloud, cam, bg, g_rgb, g_alpha)
    worst = 0.0
    for name in GaussianCloud.FIELDS:
        def objective(value, name=name):
            img = render(cloud.replace(**{name: value}), cam, bg, gate=cloud)
            return float(np.sum(img.rgb * g_rgb) + np.sum(img.alpha * g_alpha))
        numeric = central_difference(objective, getattr(cloud, name), renormalize_rows=name == "rotations")
        worst = max(worst, float(relative_error(getattr(grads, name), numeric, floor=1e-4).max()))
    return worst


def _deform_fd(rng):
    from splat_align import DeformationField

    cloud = random_cloud(rng, int(rng.integers(2, 5)))
    field = DeformationField.create(hidden=8, pos_freqs=2, time_freqs=2, seed=int(rng.integers(1 << 30)),
                                    deform_opacity=bool(rng.integers(2)))
    field.weights[-1] = rng.normal(0.0, 0.3, field.weights[-1].shape)
    # zero biases put points whose first layer is fully inactive exactly on a ReLU kink
    field.biases = [rng.normal(0.0, 0.3, b.shape) for b in field.biases]
    t = float(rng.uniform(0, 1))
    up = RenderGrads(*(rng.normal(size=getattr(cloud, f).shape) for f in GaussianCloud.FIELDS))

    def objective(c, f):
        out = deform(c, t, f)
        return sum(float(np.sum(getattr(out, k) * getattr(up, k))) for k in GaussianCloud.FIELDS)

    fg, base = deform_backward(cloud, t, field, up)
    worst = 0.0
    for i in range(len(field.weights)):
        for kind, analytic in (("weights", fg.weights[i]), ("biases", fg.biases[i])):
            def of_param(value, i=i, kind=kind):
                f = field.copy()
                getattr(f, kind)[i] = value
                return objective(cloud, f)
            numeric = central_difference(of_param, getattr(field, kind)[i])
            worst = max(worst, float(relative_error(analytic, numeric, floor=1e-5).max()))
    for name in GaussianCloud.FIELDS:
        numeric = central_difference(lambda v, name=name: objective(cloud.replace(**{name: v}), field),
                                     getattr(cloud, name))
        worst = max(worst, float(relative_error(getattr(base, name), numeric, floor=1e-5).max()))
    return worst


def _loss_fd(rng):
    stack = FeatureStack(seed=int(rng.integers(1 << 30)))

    def img():
        return ImageBuffer(rng.uniform(0, 1, (16, 16, 3)), rng.uniform(0, 1, (16, 16)))

    a, b, c, d = img(), img(), img(), img()
    worst = {}

    def check(name, fn, analytic_rgb, analytic_alpha=None, x=a):
        num = central_difference(lambda v: fn(ImageBuffer(v, x.alpha)), x.rgb)
        err = relative_error(analytic_rgb, num, floor=1e-6).max()
        if analytic_alpha is not None:
            num = central_difference(lambda v: fn(ImageBuffer(x.rgb, v)), x.alpha)
            err = max(err, relative_error(analytic_alpha, num, floor=1e-6).max())
        worst[name] = float(err)

    check("mse", lambda x: mse_loss(x, b).value, mse_loss(a, b).rgb_grad)
    check("mask", lambda x: mask_loss(x, b).value, np.zeros((16, 16, 3)), mask_loss(a, b).alpha_grad)
    check("perceptual", lambda x: perceptual_loss(x, b, stack).value, perceptual_loss(a, b, stack).rgb_grad)
    ta = texture_alignment(a, b, 0.1, stack)
    check("texture", lambda x: texture_alignment(x, b, 0.1, stack).value, ta.rgb_grad, ta.alpha_grad)
    ga = geometry_alignment([a, c], [b, d], 0.1, stack)
    check("geometry", lambda x: geometry_alignment([x, c], [b, d], 0.1, stack).value, ga.rgb_grad[0],
          ga.alpha_grad[0])
    clip = VideoClip((b, d))
    ma = motion_alignment([a, c], clip)
    check("motion", lambda x: motion_alignment([x, c], clip).value, ma.rgb_grad[0])
    return worst


def test_criterion_2_gradients_match_finite_differences():
    rng = np.random.default_rng(77)
    start = time.perf_counter()
    render_worst = max(_render_fd(rng) for _ in range(25))
    deform_worst = max(_deform_fd(rng) for _ in range(25))
    losses = _loss_fd(rng)
    elapsed = time.perf_counter() - start
    worst = max(render_worst, deform_worst, *losses.values())
    ok = record(2, "analytic gradients match central differences", worst < 1e-3 and elapsed < 300,
                f"render {render_worst:.1e}, deform {deform_worst:.1e}, losses {max(losses.values()):.1e}, "
                f"{elapsed:.1f} s")
    assert ok, losses


def test_criterion_3_sds_closed_form():
    schedule = DiffusionSchedule()
    rng = np.random.default_rng(3)
    worst_form = worst_eps = 0.0
    for _ in range(100):
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 9)), 3)
        x, target = rng.uniform(0, 1, shape), rng.uniform(0, 1, shape)
        tau = int(rng.integers(1, schedule.t_max + 1))
        oracle = MockTargetOracle(target, schedule)
        g1 = sds_gradient(x, oracle, "", tau, rng.normal(size=shape), schedule)
        g2 = sds_gradient(x, oracle, "", tau, rng.normal(size=shape), schedule)
        expected = schedule.weight(tau) * schedule.alpha(tau) / schedule.sigma(tau) * (x - target)
        worst_form = max(worst_form, np.abs(g1 - expected).max())
        worst_eps = max(worst_eps, np.abs(g1 - g2).max())
    ok = record(3, "mock SDS gradient equals the closed form", worst_form <= 1e-6 and worst_eps <= 1e-6,
                f"closed form {worst_form:.1e}, noise sensitivity {worst_eps:.1e}")
    assert ok


def test_criterion_4_anchor_resolves_gradient_conflict():
    schedule = DiffusionSchedule()
    weights = LossWeights()
    # anchor term weighted against SDS as in the pipeline (texture alignment vs text-to-image)
    anchor_weight = weights.ta / weights.t2i
    to_average, ratios = [], []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        t1, t2 = rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (8, 8, 3))
        oracles = [(MockTargetOracle(t1, schedule), ""), (MockTargetOracle(t2, schedule), "")]
        x0 = np.full((8, 8, 3), 0.5)
        free = distill_image(x0, oracles, schedule, steps=4800, lr=5e-4, seed=seed)
        anchored = distill_image(x0, oracles, schedule, steps=4800, lr=5e-4, seed=seed,
                                 anchor=ImageBuffer.from_rgb(t1), anchor_weight=anchor_weight, lam=weights.lam)
        to_average.append(np.abs(free - 0.5 * (t1 + t2)).max())
        ratios.append(np.mean((anchored - t1) ** 2) / np.mean((free - t1) ** 2))
    ok = record(4, "pixel anchor resolves conflicting guidance",
                max(to_average) < 1e-3 and max(ratios) <= 0.5,
                f"distance to target average {max(to_average):.1e}, worst anchor MSE ratio {max(ratios):.2e}")
    assert ok


def test_criterion_5_focal_recovery():
    cfg = RunConfig()
    start = time.perf_counter()
    misses = []
    sweep = FocalSweepConfig(float(cfg.width), cfg.focal.offset_min, cfg.focal.offset_max, cfg.focal.count,
                             front_camera(cfg, float(cfg.width)))
    grid = set(sweep.candidates().tolist())
    for seed in range(20):
        anchor = synth_anchor(seed, cfg.updated(n_frames=1))
        assert anchor.focal not in grid
        found = sweep_focal(anchor.meshes[0], anchor.clip[0], sweep, cfg.background).focal
        if abs(found - anchor.focal) > sweep.step:
            misses.append((seed, anchor.focal, found))
    elapsed = time.perf_counter() - start
    ok = record(5, "focal recovered within one grid step", not misses and elapsed < 60,
                f"{20 - len(misses)}/20 seeds, step {sweep.step:g} px, {elapsed:.1f} s")
    assert ok, misses


# desk-scale pipeline, shared by criteria 6 to 8

@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    start = time.perf_counter()
    code = main(["run", "--out", str(out), "--seed", "0"])
    elapsed = time.perf_counter() - start
    assert code == 0
    return out, elapsed, json.loads((out / "manifest.json").read_text())


@pytest.fixture(scope="module")
def fixture_scene():
    cfg = RunConfig()
    anchor = synth_anchor(0, cfg)
    return cfg, anchor, resolve_focals(anchor.clip, anchor.meshes, cfg)


def _side_mse(cloud, anchor, cfg, focal):
    errs = []
    for az in (90.0, 270.0):
        cam = Camera.orbit(az, 0.0, cfg.camera_radius, focal, cfg.height, cfg.width)
        truth = render_mesh(anchor.meshes[0], cam, cfg.background)
        errs.append(np.mean((render(cloud, cam, cfg.background).rgb - truth.rgb) ** 2))
    return float(np.mean(errs))


def test_criterion_6_static_round_trip(full_run, fixture_scene, tmp_path):
    out, _, manifest = full_run
    cfg, anchor, focals = fixture_scene
    with_ga = read_ply(out / "base.ply")
    start = time.perf_counter()
    without, _ = static_stage(anchor.clip, anchor.meshes, cfg.updated(weights=LossWeights(ga=0.0)), focals=focals)
    ablation_time = time.perf_counter() - start
    write_ply(without, tmp_path / "no_ga.ply")
    without = read_ply(tmp_path / "no_ga.ply")
    on, off = _side_mse(with_ga, anchor, cfg, focals[0]), _side_mse(without, anchor, cfg, focals[0])
    psnr = manifest["static"]["psnr"]
    static_time = manifest["timings"]["static"]
    ok = record(6, "static stage fits the front view and geometry alignment helps the sides",
                psnr >= 25.0 and on < off and static_time < 300 and ablation_time < 300,
                f"front PSNR {psnr:.2f} dB, side MSE {on:.5f} with vs {off:.5f} without, {static_time:.0f} s")
    assert ok


def _interframe(frames):
    return float(np.mean([np.abs(b.rgb - a.rgb).mean() for a, b in zip(frames, frames[1:])]))


def test_criterion_7_dynamic_round_trip(full_run, fixture_scene):
    from splat_align.pipeline import dynamic_stage

    out, _, manifest = full_run
    cfg, anchor, focals = fixture_scene
    with (out / "dynamic_report.csv").open() as fh:
        ma = [float(r["L_MA"]) for r in csv.DictReader(fh)]
    cloud = read_ply(out / "base.ply")
    field = load_field(out / "field.bin")
    view = front_camera(cfg, focals[0])
    full = _interframe(render_frames(cloud, field, cfg, view, anchor.clip.times))
    start = time.perf_counter()
    still, _ = dynamic_stage(cloud, anchor.clip, cfg.updated(weights=LossWeights(ma=0.0)), focals=focals)
    ablation_time = time.perf_counter() - start
    frozen = _interframe(render_frames(cloud, still, cfg, view, anchor.clip.times))
    drop, ratio = ma[-1] / ma[0], frozen / full
    dynamic_time = manifest["timings"]["dynamic"]
    ok = record(7, "motion alignment drives the deformation",
                len(ma) == 200 and drop < 0.1 and ratio < 0.2 and dynamic_time < 300 and ablation_time < 300,
                f"L_MA final/initial {drop:.3f}, inter-frame ratio without it {ratio:.3f}, {dynamic_time:.0f} s")
    assert ok


def test_criterion_8_iteration_budget(full_run):
    out, elapsed, manifest = full_run
    iterations = manifest["static"]["iterations"] + manifest["dynamic"]["iterations"]
    cfg = RunConfig()
    ok = record(8, "default run uses the 0.6K iteration budget",
                iterations == 600 == cfg.total_iters and cfg.n_frames == 8 and (cfg.height, cfg.width) == (64, 64)
                and elapsed < 900,
                f"{iterations} iterations, {elapsed / 60:.1f} min wall clock")
    assert ok


def test_criterion_9_determinism(tmp_path):
    cfg = RunConfig(static_iters=40, dynamic_iters=20)
    cfg.save(tmp_path / "cfg.json")
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["run", "--config", str(tmp_path / "cfg.json"), "--out", str(out), "--seed", "5"]) == 0
        assert main(["export", "--config", str(tmp_path / "cfg.json"), "--out", str(out)]) == 0
    names = ["base.ply", "static_report.csv", "dynamic_report.csv"] + \
        [f"export/cloud_{i:04d}.ply" for i in range(cfg.n_frames)]
    differing = [n for n in names if (outs[0] / n).read_bytes() != (outs[1] / n).read_bytes()]
    ok = record(9, "identical runs give bitwise identical artifacts", not differing,
                f"{len(names) - len(differing)}/{len(names)} files identical")
    assert ok, differing
