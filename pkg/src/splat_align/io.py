"""Reading and writing frames, meshes, point clouds and reports."""
from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IngestionError, InvalidParameterError
from .scene import GaussianCloud, ImageBuffer, TriMesh

SH_C0 = 0.28209479177387814
PLY_PROPERTIES = ("x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
                  "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1", "f_dc_2")


def read_png(path, background=(0.0, 0.0, 0.0), threshold=0.05) -> ImageBuffer:
    """Load an 8-bit PNG; without an alpha channel, key alpha off ``background``.

    A pixel is foreground when its RGB distance to the background color
    exceeds ``threshold``.
    """
    with Image.open(path) as im:
        has_alpha = im.mode in ("RGBA", "LA") or (im.mode == "P" and "transparency" in im.info)
        data = np.asarray(im.convert("RGBA" if has_alpha else "RGB"), dtype=np.float64) / 255.0
    rgb = data[..., :3]
    if has_alpha:
        alpha = data[..., 3]
    else:
        dist = np.linalg.norm(rgb - np.asarray(background, dtype=np.float64), axis=2)
        alpha = (dist > threshold).astype(np.float64)
    return ImageBuffer(rgb, alpha)


def write_png(image: ImageBuffer, path, with_alpha=True) -> None:
    rgb = np.round(np.clip(image.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    if with_alpha:
        a = np.round(np.clip(image.alpha, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(np.concatenate([rgb, a[..., None]], axis=2), "RGBA").save(path)
    else:
        Image.fromarray(rgb, "RGB").save(path)


_FRAME_RE = re.compile(r"^frame_(\d{4,})\.png$")


def read_frames(directory, background=(0.0, 0.0, 0.0), threshold=0.05) -> list[ImageBuffer]:
    """Read ``frame_0000.png`` ... in order; gaps or irregular names raise."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(f"frame directory {directory} does not exist")
    indices = {}
    for p in directory.iterdir():
        if p.suffix.lower() == ".png" and p.name.startswith("frame_"):
            m = _FRAME_RE.match(p.name)
            if not m:
                raise IngestionError(f"irregular frame name {p.name}")
            indices[int(m.group(1))] = p
    if not indices:
        raise IngestionError(f"no frame_XXXX.png files in {directory}")
    for i in range(max(indices) + 1):
        if i not in indices:
            raise IngestionError(f"frame {i} (frame_{i:04d}.png) is missing from {directory}")
    frames = []
    for i in range(len(indices)):
        try:
            frames.append(read_png(indices[i], background, threshold))
        except OSError as exc:
            raise IngestionError(f"frame {i} could not be read: {exc}") from exc
        if frames[i].shape != frames[0].shape:
            raise IngestionError(f"frame {i} is {frames[i].shape}, expected {frames[0].shape}")
    return frames


def read_obj(path) -> TriMesh:
    """Parse vertices (optionally ``v x y z r g b``) and faces; polygons are fan-triangulated."""
    verts, colors, faces = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    values = [float(x) for x in parts[1:]]
                    verts.append(values[:3])
                    colors.append(values[3:6] if len(values) >= 6 else None)
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from exc
    cols = np.array([c if c is not None else [0.5, 0.5, 0.5] for c in colors], dtype=np.float64).reshape(-1, 3)
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), cols)


def write_obj(mesh: TriMesh, path) -> None:
    with open(path, "w") as fh:
        for v, c in zip(mesh.vertices, mesh.colors):
            fh.write("v {!r} {!r} {!r} {!r} {!r} {!r}\n".format(*map(float, v), *map(float, c)))
        for f in mesh.faces:
            fh.write("f {} {} {}\n".format(*(int(i) + 1 for i in f)))


def write_ply(cloud: GaussianCloud, path) -> None:
    """Binary little-endian PLY in the layout common 3DGS viewers read."""
    n = cloud.count
    header = "ply\nformat binary_little_endian 1.0\nelement vertex {}\n{}end_header\n".format(
        n, "".join(f"property float {p}\n" for p in PLY_PROPERTIES))
    data = np.empty((n, len(PLY_PROPERTIES)), dtype="<f4")
    data[:, 0:3] = cloud.positions
    data[:, 3] = cloud.opacity_logits
    data[:, 4:7] = cloud.log_scales
    data[:, 7:11] = cloud.rotations
    data[:, 11:14] = (cloud.colors - 0.5) / SH_C0
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


_PLY_TYPES = {"float": "f4", "float32": "f4", "double": "f8", "float64": "f8", "uchar": "u1", "uint8": "u1",
              "char": "i1", "int8": "i1", "ushort": "u2", "uint16": "u2", "short": "i2", "int16": "i2",
              "uint": "u4", "uint32": "u4", "int": "i4", "int32": "i4"}


def read_ply(path) -> GaussianCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise InvalidParameterError(f"{path} is not a PLY file")
    lines = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise InvalidParameterError(f"{path}: only binary little-endian PLY is supported")
    count, props, in_vertex = None, [], False
    for line in lines:
        parts = line.split()
        if parts[:1] == ["element"]:
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
            elif count is not None:
                break
        elif parts[:1] == ["property"] and in_vertex:
            if parts[1] == "list":
                raise InvalidParameterError(f"{path}: list properties on vertices are not supported")
            props.append((parts[2], "<" + _PLY_TYPES[parts[1]]))
    if count is None:
        raise InvalidParameterError(f"{path}: no vertex element")
    dtype = np.dtype(props)
    body = np.frombuffer(raw, dtype=dtype, count=count, offset=end + len(b"end_header\n"))
    missing = [p for p in PLY_PROPERTIES if p not in dtype.names]
    if missing:
        raise InvalidParameterError(f"{path}: missing properties {missing}")

    def cols(*names):
        return np.stack([body[n].astype(np.float64) for n in names], axis=1) if count else np.zeros((0, len(names)))

    return GaussianCloud(cols("x", "y", "z"), cols("rot_0", "rot_1", "rot_2", "rot_3"),
                         cols("scale_0", "scale_1", "scale_2"),
                         cols("f_dc_0", "f_dc_1", "f_dc_2") * SH_C0 + 0.5,
                         body["opacity"].astype(np.float64) if count else np.zeros(0))


def write_rows_csv(rows, columns, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(float(row.get(c, 0.0))) if c != "iteration" else int(row[c]) for c in columns])


export_ply = write_ply
