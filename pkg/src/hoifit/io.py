"""File formats: OBJ meshes, ASCII PLY clouds, key=value configs, depth rasters."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .geometry import LabeledPointCloud, TriMesh


def write_obj(path, mesh: TriMesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise ValueError(f"{path}: only triangular faces are supported")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return TriMesh(np.asarray(verts, float).reshape(-1, 3), np.asarray(faces, np.int64).reshape(-1, 3))


def write_ply(path, cloud: LabeledPointCloud) -> None:
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write("property uchar label\nproperty uchar camera\nend_header\n")
        for p, lab, cam in zip(cloud.points, cloud.labels, cloud.cameras):
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {lab} {cam}\n")


def read_ply(path) -> LabeledPointCloud:
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        props, n = [], None
        for line in fh:
            parts = line.split()
            if parts[:2] == ["format", "ascii"]:
                continue
            if parts[0] == "format":
                raise ValueError(f"{path}: only ASCII PLY is supported")
            if parts[:2] == ["element", "vertex"]:
                n = int(parts[2])
            elif parts[0] == "property":
                props.append(parts[-1])
            elif parts[0] == "end_header":
                break
        data = np.loadtxt(fh, ndmin=2, max_rows=n) if n else np.zeros((0, len(props)))
    col = {name: i for i, name in enumerate(props)}
    pts = data[:, [col["x"], col["y"], col["z"]]] if len(data) else np.zeros((0, 3))
    labels = data[:, col["label"]] if "label" in col and len(data) else np.zeros(len(pts))
    cams = data[:, col["camera"]] if "camera" in col and len(data) else np.zeros(len(pts))
    return LabeledPointCloud(pts, labels.astype(np.uint8), cams.astype(np.uint8))


def read_config(path, _seen=None) -> dict:
    """Line-based ``key = value`` file; ``include other.cfg`` pulls in another file first.

    Blank lines and ``#`` comments are ignored; later keys override earlier ones.
    """
    path = Path(path)
    seen = set() if _seen is None else _seen
    real = path.resolve()
    if real in seen:
        raise ValueError(f"{path}: include cycle")
    seen.add(real)
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("include "):
                out.update(read_config(path.parent / line[len("include "):].strip(), seen))
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_config(path, values: dict) -> None:
    with open(path, "w") as fh:
        for k, v in values.items():
            if isinstance(v, (list, tuple, np.ndarray)):
                v = " ".join(_fmt(x) for x in np.ravel(v))
            else:
                v = _fmt(v)
            fh.write(f"{k} = {v}\n")


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def parse_value(text: str):
    """Best-effort conversion of a config value: int, float, bool, vector or string."""
    parts = text.split()
    if len(parts) > 1:
        try:
            return np.array([float(p) for p in parts])
        except ValueError:
            return text
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def write_depth(path, depth: np.ndarray) -> None:
    """ASCII header line then little-endian float32 rows (inf for empty pixels)."""
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(f"DEPTH width={w} height={h} format=float32le\n".encode())
        fh.write(depth.tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if not header or header[0] != "DEPTH":
            raise ValueError(f"{path}: not a depth raster")
        fields = dict(item.split("=") for item in header[1:])
        w, h = int(fields["width"]), int(fields["height"])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} values, found {data.size}")
    return data.reshape(h, w).astype(float)


def atomic_write(path, writer) -> None:
    """Write through a temporary sibling and rename, so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)
