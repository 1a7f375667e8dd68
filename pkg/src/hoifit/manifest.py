"""On-disk layouts: synthetic frame manifests and fit results.

Frame manifest (one directory per frame)::

    meshes/body.obj              posed ground-truth body
    meshes/object.obj            posed ground-truth object
    meshes/object_template.obj   object template in its own frame
    clouds/cam<k>.ply            labeled cloud seen by camera k
    clouds/merged.ply            all cameras concatenated in camera order
    cameras.txt                  one camera per line (see write_cameras)
    joints2d.csv                 camera,landmark,u,v,visible
    contacts.csv                 vertex,label,distance,bx,by,bz,cx,cy,cz per object vertex
    params.txt                   key = value record of the ground-truth parameters

Result directory::

    result.txt                   key = value record (body params, rigid pose, flags)
    body.obj, object.obj         fitted posed meshes
    contacts.csv                 vertex,c_x,c_y,c_z,gap
    energy.csv                   stage,iter,<terms>,total per optimizer iteration
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .bodymodel import BodyEvaluation, BodyParams, BodyTemplate, default_template, load_template
from .camera import CameraView
from .geometry import LabeledPointCloud, RigidPose, SpatialIndex
from .io import parse_value, read_config, read_obj, read_ply, write_config, write_obj, write_ply
from .metrics import ContactLabels

_CAMERA_HEADER = "# id fx fy cx cy width height r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2"


def write_cameras(path, cameras) -> None:
    with open(path, "w") as fh:
        fh.write(_CAMERA_HEADER + "\n")
        for k, c in enumerate(cameras):
            vals = [c.fx, c.fy, c.cx, c.cy, c.width, c.height, *np.ravel(c.R), *np.ravel(c.t)]
            fh.write(f"{k} " + " ".join(repr(float(v)) if not isinstance(v, int) else str(v)
                                        for v in vals) + "\n")


def read_cameras(path) -> list:
    cams = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].split()
            if not line:
                continue
            v = [float(x) for x in line[1:]]
            cams.append(CameraView(v[0], v[1], v[2], v[3], int(v[4]), int(v[5]),
                                   np.array(v[6:15]).reshape(3, 3), np.array(v[15:18])))
    return cams


def write_joints2d(path, joints2d, visible) -> None:
    with open(path, "w") as fh:
        fh.write("camera,landmark,u,v,visible\n")
        for k, (uv, vis) in enumerate(zip(joints2d, visible)):
            for j, (p, ok) in enumerate(zip(uv, vis)):
                fh.write(f"{k},{j},{float(p[0])!r},{float(p[1])!r},{int(ok)}\n")


def read_joints2d(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.size == 0:
        return [], []
    n_cam = int(rows[:, 0].max()) + 1
    uvs, vis = [], []
    for k in range(n_cam):
        r = rows[rows[:, 0] == k]
        r = r[np.argsort(r[:, 1])]
        uvs.append(r[:, 2:4].copy())
        vis.append(r[:, 4] > 0)
    return uvs, vis


def write_contacts(path, contacts: ContactLabels) -> None:
    with open(path, "w") as fh:
        fh.write("vertex,label,distance,bx,by,bz,cx,cy,cz\n")
        for j in range(len(contacts.labels)):
            b = contacts.body_points[j]
            c = contacts.canonical[j]
            fh.write(f"{j},{int(contacts.labels[j])},{float(contacts.distances[j])!r},"
                     f"{float(b[0])!r},{float(b[1])!r},{float(b[2])!r},{float(c[0])!r},{float(c[1])!r},{float(c[2])!r}\n")


def read_contacts(path) -> ContactLabels:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ContactLabels(rows[:, 1] > 0, rows[:, 3:6], rows[:, 6:9], rows[:, 2])


def _template_ref(template: BodyTemplate, root: Path) -> str:
    from .synth import _shared_template

    if template is _shared_template():
        return "default"
    from .bodymodel import save_template

    save_template(template, root / "body_template.bin")
    return "body_template.bin"


def load_body_template(ref: str, root: Path) -> BodyTemplate:
    if ref == "default":
        from .synth import _shared_template

        return _shared_template()
    return load_template(root / ref)


def write_frame(root, frame) -> None:
    """Write a :class:`hoifit.synth.FrameGT` into the manifest layout under ``root``."""
    root = Path(root)
    (root / "meshes").mkdir(parents=True, exist_ok=True)
    (root / "clouds").mkdir(exist_ok=True)
    write_obj(root / "meshes" / "body.obj", frame.body_mesh)
    write_obj(root / "meshes" / "object.obj", frame.object_mesh)
    write_obj(root / "meshes" / "object_template.obj", frame.object_template)
    for k, c in enumerate(frame.clouds):
        write_ply(root / "clouds" / f"cam{k}.ply", c)
    write_ply(root / "clouds" / "merged.ply", frame.cloud)
    write_cameras(root / "cameras.txt", frame.cameras)
    write_joints2d(root / "joints2d.csv", frame.joints2d, frame.joints2d_visible)
    write_contacts(root / "contacts.csv", frame.contacts)
    rec = {"template": _template_ref(frame.template, root),
           "pose": frame.body_params.pose, "trans": frame.body_params.trans,
           "betas": frame.body_params.betas, "object_name": frame.object_name,
           "object_R": frame.object_pose.R, "object_t": frame.object_pose.t,
           "intent": frame.intent, "seed": frame.seed}
    for k, v in frame.object_params.items():
        rec[f"object_param.{k}"] = v
    write_config(root / "params.txt", rec)


def read_frame(root):
    """Inverse of :func:`write_frame`; returns a :class:`hoifit.synth.FrameGT`."""
    from .synth import FrameGT

    root = Path(root)
    rec = read_config(root / "params.txt")
    tpl = load_body_template(rec.get("template", "default"), root)
    J = tpl.n_joints
    body = BodyParams(np.asarray(parse_value(rec["pose"]), float).reshape(J, 3),
                      np.asarray(parse_value(rec["trans"]), float),
                      np.atleast_1d(np.asarray(parse_value(rec["betas"]), float)))
    pose = RigidPose(np.asarray(parse_value(rec["object_R"]), float).reshape(3, 3),
                     np.asarray(parse_value(rec["object_t"]), float))
    oparams = {k.split(".", 1)[1]: parse_value(v) for k, v in rec.items()
               if k.startswith("object_param.")}
    cams = read_cameras(root / "cameras.txt")
    clouds = [read_ply(root / "clouds" / f"cam{k}.ply") for k in range(len(cams))]
    j2d, vis = read_joints2d(root / "joints2d.csv")
    return FrameGT(tpl, body, read_obj(root / "meshes" / "body.obj"), rec.get("object_name", "object"),
                   oparams, read_obj(root / "meshes" / "object_template.obj"), pose,
                   read_obj(root / "meshes" / "object.obj"), read_contacts(root / "contacts.csv"),
                   cams, j2d, vis, clouds, rec.get("intent", "none"), int(parse_value(rec.get("seed", "0"))))


def write_sequence(root, frames) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for t, fr in enumerate(frames):
        write_frame(root / f"frame_{t:04d}", fr)


def read_sequence(root) -> list:
    root = Path(root)
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and d.name.startswith("frame_"))
    return [read_frame(d) for d in dirs]


def is_sequence(root) -> bool:
    root = Path(root)
    return root.is_dir() and any(d.name.startswith("frame_") for d in root.iterdir())


# --------------------------------------------------------------------------- results


def write_result(root, result, template: BodyTemplate, object_template) -> None:
    """Export a :class:`hoifit.fitting.FitResult` into the result layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rec = {}
    body_mesh = obj_mesh = None
    if result.body_params is not None:
        p = result.body_params
        rec.update(pose=p.pose, trans=p.trans, betas=p.betas)
        body_mesh = BodyEvaluation(template, p, grad=False).mesh()
        write_obj(root / "body.obj", body_mesh)
    if result.object_pose is not None:
        rec.update(object_R=result.object_pose.R, object_t=result.object_pose.t)
        obj_mesh = object_template.transformed(result.object_pose.R, result.object_pose.t)
        write_obj(root / "object.obj", obj_mesh)
    rec["flags"] = ";".join(result.flags) if result.flags else "none"
    rec["converged"] = ";".join(f"{k}:{int(v)}" for k, v in sorted(result.converged.items())) or "none"
    rec["iterations"] = ";".join(f"{k}:{v}" for k, v in sorted(result.iterations.items())) or "none"
    rec["final_energy"] = result.final_energy
    write_config(root / "result.txt", rec)
    with open(root / "contacts.csv", "w") as fh:
        fh.write("vertex,c_x,c_y,c_z,gap\n")
        if len(result.contacts) and body_mesh is not None and obj_mesh is not None:
            gaps = SpatialIndex(body_mesh).query(obj_mesh.vertices[result.contacts.indices]).distances
        else:
            gaps = np.zeros(len(result.contacts))
        for j, c, g in zip(result.contacts.indices, result.contacts.targets, gaps):
            fh.write(f"{j},{float(c[0])!r},{float(c[1])!r},{float(c[2])!r},{float(g)!r}\n")
    write_energy_csv(root / "energy.csv", result.history)


def write_energy_csv(path, history) -> None:
    from .fitting import TERMS

    with open(path, "w") as fh:
        fh.write("stage,iter," + ",".join(TERMS) + ",total\n")
        for row in history:
            vals = [f"{row.get(t, 0.0):.9g}" for t in TERMS]
            fh.write(f"{row['stage']},{row['iter']}," + ",".join(vals) + f",{row['total']:.9g}\n")


def read_result(root, template: BodyTemplate):
    """Returns ``(BodyParams or None, RigidPose or None, contact indices)``."""
    root = Path(root)
    rec = read_config(root / "result.txt")
    body = pose = None
    if "pose" in rec:
        J = template.n_joints
        body = BodyParams(np.asarray(parse_value(rec["pose"]), float).reshape(J, 3),
                          np.asarray(parse_value(rec["trans"]), float),
                          np.atleast_1d(np.asarray(parse_value(rec["betas"]), float)))
    if "object_R" in rec:
        pose = RigidPose(np.asarray(parse_value(rec["object_R"]), float).reshape(3, 3),
                         np.asarray(parse_value(rec["object_t"]), float))
    idx = np.zeros(0, dtype=np.int64)
    cpath = root / "contacts.csv"
    if cpath.exists() and os.path.getsize(cpath) > 0:
        rows = np.loadtxt(cpath, delimiter=",", skiprows=1, ndmin=2)
        if rows.size:
            idx = rows[:, 0].astype(np.int64)
    return body, pose, idx
