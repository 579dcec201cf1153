"""Command-line entry point: ``splat-align focal|static|dynamic|run|render|export|synth``.

Without ``--frames`` the stages run on the built-in synthetic anchor for
``--seed``, which makes every command usable with no input data.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import RunConfig
from .deform import deform, load_field, save_field
from .errors import SplatAlignError
from .io import read_ply, write_obj, write_ply, write_png, write_rows_csv
from .pipeline import (DYNAMIC_COLUMNS, STATIC_COLUMNS, cloud_digest, dynamic_stage, front_camera, ingest_anchor,
                       ingest_meshes, render_sequence, resolve_focals, static_stage)

log = logging.getLogger("splat_align")

COMMANDS = ("focal", "static", "dynamic", "run", "render", "export", "synth")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splat-align", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON file mirroring RunConfig")
    parser.add_argument("--seed", type=int, help="override cfg.seed")
    parser.add_argument("--out", help="output directory (overrides cfg.out_dir)")
    parser.add_argument("--oracle", help="'mock' or a denoiser base URL")
    parser.add_argument("--frames", help="directory of frame_%%04d.png anchor frames")
    parser.add_argument("--meshes", help="directory of mesh_%%04d.obj files")
    parser.add_argument("--cloud", help="base cloud PLY (default: <out>/base.ply)")
    parser.add_argument("--field", help="deformation checkpoint (default: <out>/field.bin)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        if args.seed < 0:
            raise SplatAlignError("--seed must be non-negative")
        changes["seed"] = args.seed
    if args.out:
        changes["out_dir"] = args.out
    if args.oracle:
        changes["oracle"] = args.oracle
    if args.frames:
        changes["frames_dir"] = args.frames
    if args.meshes:
        changes["meshes_dir"] = args.meshes
    return cfg.updated(**changes)


def load_inputs(cfg: RunConfig):
    """Anchor clip and per-frame meshes from disk, or the synthetic fixture."""
    if cfg.frames_dir is None:
        from .synth import synth_anchor
        anchor = synth_anchor(cfg.seed, cfg)
        return anchor.clip, anchor.meshes
    if cfg.meshes_dir is None:
        raise SplatAlignError("--meshes is required together with --frames")
    clip = ingest_anchor(cfg.frames_dir, cfg)
    return clip, ingest_meshes(cfg.meshes_dir, len(clip))


class Run:
    """Output directory plus the manifest accumulated while commands execute."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = {"command": command, "config": cfg.to_dict(), "timings": {}}

    def timed(self, name, fn, *args, **kwargs):
        start = time.perf_counter()
        result = fn(*args, **kwargs)
        self.manifest["timings"][name] = time.perf_counter() - start
        return result

    def write_manifest(self):
        # render/export keep the stage manifest (and its focal) intact
        name = f"{self.manifest['command']}_manifest.json" if self.manifest["command"] in ("render", "export") \
            else "manifest.json"
        path = self.out / name
        path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        return path


def _focals(run: Run, clip, meshes):
    focals = run.timed("focal", resolve_focals, clip, meshes, run.cfg)
    run.manifest["focal"] = focals[0]
    run.manifest["focals"] = focals
    return focals


def _static(run: Run, clip, meshes, focals):
    cloud, report = run.timed("static", static_stage, clip, meshes, run.cfg, focals=focals)
    write_ply(cloud, run.out / "base.ply")
    write_rows_csv(report.rows, STATIC_COLUMNS, run.out / "static_report.csv")
    run.manifest["static"] = {"psnr": report.psnr, "iterations": len(report.rows), "cloud_sha256": cloud_digest(cloud)}
    return cloud


def _dynamic(run: Run, cloud, clip, focals):
    field, report = run.timed("dynamic", dynamic_stage, cloud, clip, run.cfg, focals=focals)
    save_field(field, run.out / "field.bin")
    write_rows_csv(report.rows, DYNAMIC_COLUMNS, run.out / "dynamic_report.csv")
    run.manifest["dynamic"] = {"psnr": report.psnr, "iterations": len(report.rows)}
    return field


def _stored_focal(run: Run):
    path = run.out / "manifest.json"
    if run.cfg.focal.fixed_focal is not None:
        return float(run.cfg.focal.fixed_focal)
    if path.exists():
        focal = json.loads(path.read_text()).get("focal")
        if focal is not None:
            return float(focal)
    return None


def _stored_focals(run: Run, n):
    path = run.out / "manifest.json"
    if run.cfg.focal.fixed_focal is None and path.exists():
        focals = json.loads(path.read_text()).get("focals")
        if focals and len(focals) == n:
            return [float(f) for f in focals]
    focal = _stored_focal(run)
    return None if focal is None else [focal] * n


def _artifacts(run: Run, args, need_field):
    cloud = read_ply(args.cloud or run.out / "base.ply")
    field = None
    field_path = Path(args.field) if args.field else run.out / "field.bin"
    if need_field or field_path.exists():
        field = load_field(field_path)
    return cloud, field


def frame_times(n):
    return [0.0] if n <= 1 else [k / (n - 1) for k in range(n)]


def execute(args) -> int:
    cfg = resolve_config(args)
    run = Run(cfg, args.command)
    cmd = args.command

    if cmd == "synth":
        from .synth import synth_anchor
        anchor = run.timed("synth", synth_anchor, cfg.seed, cfg)
        (run.out / "frames").mkdir(exist_ok=True)
        (run.out / "meshes").mkdir(exist_ok=True)
        for i, (frame, mesh) in enumerate(zip(anchor.clip, anchor.meshes)):
            write_png(frame, run.out / "frames" / f"frame_{i:04d}.png")
            write_obj(mesh, run.out / "meshes" / f"mesh_{i:04d}.obj")
        write_ply(anchor.cloud, run.out / "ground_truth.ply")
        run.manifest["focal"] = anchor.focal
    elif cmd in ("focal", "static", "run"):
        clip, meshes = load_inputs(cfg)
        focals = _focals(run, clip, meshes)
        log.info("focal %.3f", focals[0])
        if cmd in ("static", "run"):
            cloud = _static(run, clip, meshes, focals)
        if cmd == "run":
            field = _dynamic(run, cloud, clip, focals)
            run.timed("render", render_sequence, cloud, field, cfg, front_camera(cfg, focals[0]),
                      clip.times, run.out / "render")
    elif cmd == "dynamic":
        clip, meshes = load_inputs(cfg)
        focals = _stored_focals(run, len(clip)) or _focals(run, clip, meshes)
        run.manifest["focal"] = focals[0]
        run.manifest["focals"] = focals
        cloud = read_ply(args.cloud or run.out / "base.ply")
        _dynamic(run, cloud, clip, focals)
    elif cmd == "render":
        cloud, field = _artifacts(run, args, need_field=False)
        focal = _stored_focal(run) or float(cfg.width)
        run.manifest["focal"] = focal
        paths = run.timed("render", render_sequence, cloud, field, cfg, front_camera(cfg, focal),
                          frame_times(cfg.n_frames), run.out / "render")
        run.manifest["frames"] = len(paths)
    elif cmd == "export":
        cloud, field = _artifacts(run, args, need_field=True)
        export_dir = run.out / "export"
        export_dir.mkdir(exist_ok=True)
        times = frame_times(cfg.n_frames)
        for i, t in enumerate(times):
            write_ply(deform(cloud, t, field), export_dir / f"cloud_{i:04d}.ply")
        run.manifest["exported"] = len(times)

    path = run.write_manifest()
    print(f"{cmd}: wrote {path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return execute(args)
    except (SplatAlignError, OSError) as exc:
        print(f"splat-align {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
