"""Synthetic multi-view scenes with full ground truth.

Posed bodies interact with procedural objects; meshes are ray cast into depth and
label images for a camera rig, then lifted back to labeled point clouds with
along-ray noise, dropout and optional localized occlusion.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .bodymodel import BodyEvaluation, BodyParams, BodyTemplate, default_template
from .camera import CameraView, default_rig
from .errors import AmbiguousOrientation, UnsatisfiableScene
from .geometry import HUMAN, OBJECT, LabeledPointCloud, RigidPose, SpatialIndex, TriMesh
from .fields import compute_orientation
from .metrics import ContactLabels, annotate_contacts
from .objects import make_object
from .rotation import log_so3, rodrigues

NO_LABEL = 255
_NEAR = 1e-3


# ------------------------------------------------------------------------ rendering


def render_depth(meshes, camera: CameraView, max_pairs: int = 4_000_000):
    """Z-buffered ray casting of labeled meshes through pixel centres.

    ``meshes`` is a sequence of ``(TriMesh, label)``. Returns ``(depth, labels)``
    where depth is camera z (inf where nothing is hit) and labels use 255 for empty
    pixels. Each pixel keeps the nearest hit; exact ties go to the earlier triangle.
    """
    W, H = camera.width, camera.height
    tris, labs = [], []
    for mesh, label in meshes:
        tris.append(camera.to_camera(mesh.vertices)[mesh.faces])
        labs.append(np.full(mesh.n_faces, label, dtype=np.uint8))
    depth = np.full(H * W, np.inf)
    labels = np.full(H * W, NO_LABEL, dtype=np.uint8)
    if not tris:
        return depth.reshape(H, W), labels.reshape(H, W)
    tri = np.concatenate(tris)
    tri_lab = np.concatenate(labs)
    keep = np.all(tri[:, :, 2] > _NEAR, axis=1)
    tri_ids = np.nonzero(keep)[0]
    tri = tri[keep]
    u = camera.fx * tri[:, :, 0] / tri[:, :, 2] + camera.cx
    v = camera.fy * tri[:, :, 1] / tri[:, :, 2] + camera.cy
    u0 = np.clip(np.ceil(u.min(axis=1)), 0, W).astype(np.int64)
    u1 = np.clip(np.floor(u.max(axis=1)), -1, W - 1).astype(np.int64)
    v0 = np.clip(np.ceil(v.min(axis=1)), 0, H).astype(np.int64)
    v1 = np.clip(np.floor(v.max(axis=1)), -1, H - 1).astype(np.int64)
    nu = np.maximum(u1 - u0 + 1, 0)
    nv = np.maximum(v1 - v0 + 1, 0)
    counts = nu * nv
    best_t = np.full(H * W, np.inf)
    best_tri = np.full(H * W, np.iinfo(np.int64).max)
    starts = np.concatenate([[0], np.cumsum(counts)])
    # process triangles in chunks bounded by the number of (triangle, pixel) pairs
    lo = 0
    while lo < len(tri):
        hi = int(np.searchsorted(starts, starts[lo] + max_pairs, side="right")) - 1
        hi = max(hi, lo + 1)
        sel = np.arange(lo, hi)
        c = counts[sel]
        total = int(c.sum())
        if total:
            owner = np.repeat(sel, c)
            local = np.arange(total) - np.repeat(starts[sel] - starts[lo], c)
            pu = u0[owner] + local % nu[owner]
            pv = v0[owner] + local // nu[owner]
            t, hit = _ray_triangle(camera, pu.astype(float), pv.astype(float), tri[owner])
            pix = (pv * W + pu)[hit]
            t = t[hit]
            gid = tri_ids[owner[hit]]
            o = np.lexsort((gid, t, pix))
            pix, t, gid = pix[o], t[o], gid[o]
            first = np.ones(len(pix), dtype=bool)
            first[1:] = pix[1:] != pix[:-1]
            pix, t, gid = pix[first], t[first], gid[first]
            better = (t < best_t[pix]) | ((t == best_t[pix]) & (gid < best_tri[pix]))
            best_t[pix[better]] = t[better]
            best_tri[pix[better]] = gid[better]
        lo = hi
    hit = np.isfinite(best_t)
    depth[hit] = best_t[hit]
    labels[hit] = np.concatenate(labs)[best_tri[hit]]
    return depth.reshape(H, W), labels.reshape(H, W)


def _ray_triangle(camera, pu, pv, tri):
    """Moller-Trumbore from the camera centre; returns camera depth and hit mask."""
    d = np.stack([(pu - camera.cx) / camera.fx, (pv - camera.cy) / camera.fy, np.ones_like(pu)], 1)
    a = tri[:, 0]
    e1 = tri[:, 1] - a
    e2 = tri[:, 2] - a
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-15
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = -a
    bu = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    bv = np.einsum("ij,ij->i", d, qvec) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    hit = ok & (bu >= 0) & (bv >= 0) & (bu + bv <= 1) & (t > _NEAR)
    return t, hit


def cast_ray(camera: CameraView, u: float, v: float, meshes):
    """Exhaustive single-pixel ray cast (reference for :func:`render_depth`)."""
    best, label = np.inf, NO_LABEL
    for mesh, lab in meshes:
        tri = camera.to_camera(mesh.vertices)[mesh.faces]
        n = len(tri)
        t, hit = _ray_triangle(camera, np.full(n, float(u)), np.full(n, float(v)), tri)
        if np.any(hit) and t[hit].min() < best:
            best = float(t[hit].min())
            label = lab
    return best, label


# --------------------------------------------------------------------- backprojection


@dataclass
class NoiseModel:
    """Along-ray Gaussian noise, uniform dropout and a localized object occlusion."""

    sigma: float = 0.005
    dropout: float = 0.1
    occlusion_center: np.ndarray | None = None
    occlusion_radius: float = 0.15
    occlusion_fraction: float = 0.6

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise sigma must be nonnegative")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")


def backproject(depth: np.ndarray, labels: np.ndarray, camera: CameraView,
                noise: NoiseModel | None = None, seed=0, camera_id: int = 0) -> LabeledPointCloud:
    """Lift labeled depth pixels to world points, then apply noise and dropout."""
    noise = noise or NoiseModel(0.0, 0.0)
    rng = np.random.default_rng(seed)
    valid = np.isfinite(depth) & (labels != NO_LABEL)
    pv, pu = np.nonzero(valid)
    z = depth[pv, pu]
    d = camera.rays(pu.astype(float), pv.astype(float))
    pts = camera.center + z[:, None] * d
    lab = labels[pv, pu]
    n = len(pts)
    eps = rng.normal(0.0, 1.0, n) * noise.sigma
    keep = rng.random(n) >= noise.dropout
    occl = rng.random(n)
    pts = pts + eps[:, None] * d / np.linalg.norm(d, axis=1, keepdims=True)
    if noise.occlusion_center is not None:
        near = (lab == OBJECT) & (
            np.linalg.norm(pts - np.asarray(noise.occlusion_center), axis=1) < noise.occlusion_radius)
        keep &= ~(near & (occl < noise.occlusion_fraction))
    return LabeledPointCloud(pts[keep], lab[keep], np.full(int(keep.sum()), camera_id, np.uint8))


# ------------------------------------------------------------------------- scenes


@dataclass
class SceneSpec:
    """Inputs of one synthetic frame; ``object_pose`` is refined by the placement search."""

    body_params: BodyParams
    object_name: str = "box"
    object_params: dict = field(default_factory=dict)
    object_pose: RigidPose = field(default_factory=RigidPose.identity)
    intent: str = "none"
    gap: float = 0.004
    noise: NoiseModel = field(default_factory=NoiseModel)
    rig: list = None
    seed: int = 0
    template: BodyTemplate = None

    def resolved(self) -> "SceneSpec":
        s = dataclasses.replace(self)
        if s.rig is None:
            s.rig = default_rig()
        if s.template is None:
            s.template = _shared_template()
        return s


@dataclass
class FrameGT:
    template: BodyTemplate
    body_params: BodyParams
    body_mesh: TriMesh
    object_name: str
    object_params: dict
    object_template: TriMesh
    object_pose: RigidPose
    object_mesh: TriMesh
    contacts: ContactLabels
    cameras: list
    joints2d: list
    joints2d_visible: list
    clouds: list
    intent: str = "none"
    seed: int = 0

    @property
    def cloud(self) -> LabeledPointCloud:
        return LabeledPointCloud.concatenate(self.clouds)


_TEMPLATE = None


def _shared_template() -> BodyTemplate:
    global _TEMPLATE
    if _TEMPLATE is None:
        _TEMPLATE = default_template()
    return _TEMPLATE


def _hand_vertices(template: BodyTemplate, side: str) -> np.ndarray:
    names = list(template.joint_names)
    cols = [names.index(f"{side}_wrist"), names.index(f"{side}_hand")]
    return np.nonzero(template.weights[:, cols].sum(axis=1) > 0.5)[0]


def _min_gap(points: np.ndarray, mesh: TriMesh) -> float:
    return float(SpatialIndex(mesh).query(points).distances.min())


def _march(gap_fn, target, s0, step, n_max=400):
    """Advance ``s`` from a contact-free ``s0`` until the gap drops to ``target``; bisect."""
    prev = s0
    g_prev = gap_fn(prev)
    if g_prev <= target:
        raise UnsatisfiableScene("placement search started in contact")
    for _ in range(n_max):
        s = prev + step
        g = gap_fn(s)
        if g <= target:
            lo, hi = prev, s
            for _ in range(50):
                mid = 0.5 * (lo + hi)
                if gap_fn(mid) > target:
                    lo = mid
                else:
                    hi = mid
            return lo
        prev = s
    raise UnsatisfiableScene("placement search did not reach contact")


def place_object(spec: SceneSpec, body_mesh: TriMesh):
    """Solve the contact intent; returns (object template, pose, object params)."""
    tpl = spec.template
    params = dict(spec.object_params)
    R = spec.object_pose.R
    intent = spec.intent
    if intent in ("none", "far"):
        template = make_object(spec.object_name, **params)
        return template, RigidPose(R, spec.object_pose.t), params
    if intent in ("right_hand_on_top", "hand_on_top"):
        template = make_object(spec.object_name, **params)
        hand = body_mesh.vertices[_hand_vertices(tpl, "r")]
        palm = hand.mean(axis=0)
        local = template.vertices @ R.T
        # object top surface under the palm, offset in the horizontal plane as requested
        top_y = local[:, 1].max()
        t = np.array([palm[0], 0.0, palm[2]]) + np.array([spec.object_pose.t[0], 0.0,
                                                          spec.object_pose.t[2]])
        start = hand[:, 1].min() - top_y - 0.25

        def gap(s):
            return _min_gap(hand, template.transformed(R, t + [0.0, s, 0.0]))

        s = _march(gap, spec.gap, start, 0.01)
        t = t + [0.0, s, 0.0]
        _check_clear(body_mesh, template.transformed(R, t), spec.gap, hand_only=_hand_vertices(tpl, "r"))
        return template, RigidPose(R, t), params
    if intent in ("both_hands_sides", "lift", "grasp"):
        lh = body_mesh.vertices[_hand_vertices(tpl, "l")]
        rh = body_mesh.vertices[_hand_vertices(tpl, "r")]
        mid = 0.5 * (lh.mean(axis=0) + rh.mean(axis=0))
        across = lh.mean(axis=0) - rh.mean(axis=0)
        across /= np.linalg.norm(across)
        # object x axis spans the hands; keep the requested yaw-free up direction
        up = np.array([0.0, 1.0, 0.0])
        fwd = np.cross(across, up)
        fwd /= np.linalg.norm(fwd)
        R = np.stack([across, np.cross(fwd, across), fwd], axis=1)
        t = mid + spec.object_pose.t
        hands = np.concatenate([lh, rh])

        def gap(w):
            return _min_gap(hands, make_object(spec.object_name, **{**params, "width": w})
                            .transformed(R, t))

        params["width"] = float(_march(gap, spec.gap, 0.1, 0.02))
        template = make_object(spec.object_name, **params)
        return template, RigidPose(R, t), params
    raise ValueError(f"unknown contact intent {intent!r}")


def _check_clear(body_mesh, obj_mesh, gap, hand_only):
    others = np.setdiff1d(np.arange(body_mesh.n_vertices), hand_only)
    if _min_gap(body_mesh.vertices[others], obj_mesh) < 0.5 * gap:
        raise UnsatisfiableScene("object intersects the body away from the hand")


def generate_scene(spec: SceneSpec) -> FrameGT:
    spec = spec.resolved()
    tpl = spec.template
    spec.body_params.check(tpl)
    ev = BodyEvaluation(tpl, spec.body_params, grad=False)
    body_mesh = ev.mesh()
    obj_template, pose, oparams = place_object(spec, body_mesh)
    if spec.object_name != "cuboid":
        try:
            compute_orientation(obj_template.vertices)
        except AmbiguousOrientation as exc:
            raise UnsatisfiableScene(f"placed object has ambiguous principal axes: {exc}") from None
    obj_mesh = obj_template.transformed(pose.R, pose.t)
    return _finish_frame(spec, ev, body_mesh, obj_template, pose, oparams, obj_mesh)


def _finish_frame(spec, ev, body_mesh, obj_template, pose, oparams, obj_mesh):
    tpl = spec.template
    contacts = annotate_contacts(body_mesh, obj_mesh, 0.02, canonical_vertices=tpl.vertices)
    clouds, j2d, vis = [], [], []
    for k, cam in enumerate(spec.rig):
        depth, labels = render_depth([(body_mesh, HUMAN), (obj_mesh, OBJECT)], cam)
        clouds.append(backproject(depth, labels, cam, spec.noise, seed=[spec.seed, k], camera_id=k))
        uv, ok = cam.project(ev.joints[tpl.landmarks])
        inside = ok & (uv[:, 0] >= 0) & (uv[:, 0] <= cam.width - 1) & (uv[:, 1] >= 0) & (
            uv[:, 1] <= cam.height - 1)
        j2d.append(uv)
        vis.append(inside)
    return FrameGT(tpl, spec.body_params.copy(), body_mesh, spec.object_name, oparams,
                   obj_template, pose, obj_mesh, contacts, list(spec.rig), j2d, vis, clouds,
                   spec.intent, int(spec.seed))


# ---------------------------------------------------------------- pose library


def _aa(R):
    return log_so3(R)


def _rx(a):
    return rodrigues(np.array([a, 0.0, 0.0]))


def _ry(a):
    return rodrigues(np.array([0.0, a, 0.0]))


def _rz(a):
    return rodrigues(np.array([0.0, 0.0, a]))


def base_pose(template: BodyTemplate, kind: str, rng: np.random.Generator | None = None,
              arm_tilt: float | None = None, jitter: float = 0.05) -> BodyParams:
    """Library poses: ``reach`` (right hand forward-down), ``lift`` (both arms forward,
    palms facing each other), ``rest`` (arms lowered)."""
    rng = rng or np.random.default_rng(0)
    names = list(template.joint_names)
    j = {n: i for i, n in enumerate(names)}
    p = BodyParams.zeros(template)
    p.pose += rng.normal(0.0, jitter, p.pose.shape)
    p.pose[j["pelvis"]] = [0.0, rng.uniform(-0.3, 0.3), 0.0]
    if kind == "reach":
        tilt = rng.uniform(0.7, 1.0) if arm_tilt is None else arm_tilt
        p.pose[j["r_shoulder"]] = _aa(_rx(tilt) @ _ry(np.pi / 2))
        p.pose[j["r_elbow"]] = [0.0, rng.uniform(0.0, 0.3), 0.0]
        p.pose[j["l_shoulder"]] = _aa(_rz(-1.2))
        p.pose[j["spine2"]] += [rng.uniform(0.0, 0.2), 0.0, 0.0]
    elif kind == "lift":
        tilt = rng.uniform(0.3, 0.6) if arm_tilt is None else arm_tilt
        p.pose[j["l_shoulder"]] = _aa(_rx(tilt) @ _ry(-np.pi / 2))
        p.pose[j["r_shoulder"]] = _aa(_rx(tilt) @ _ry(np.pi / 2))
        p.pose[j["l_elbow"]] = [0.0, 0.0, 0.0]
        p.pose[j["r_elbow"]] = [0.0, 0.0, 0.0]
        p.pose[j["l_wrist"]] = [np.pi / 2, 0.0, 0.0]
        p.pose[j["r_wrist"]] = [-np.pi / 2, 0.0, 0.0]
        p.pose[j["l_hand"]] = [0.0, 0.0, 0.0]
        p.pose[j["r_hand"]] = [0.0, 0.0, 0.0]
    elif kind == "rest":
        p.pose[j["l_shoulder"]] = _aa(_rz(-1.2))
        p.pose[j["r_shoulder"]] = _aa(_rz(1.2))
    else:
        raise ValueError(f"unknown pose kind {kind!r}")
    p.trans = np.array([rng.uniform(-0.1, 0.1), 0.0, rng.uniform(-0.1, 0.1)])
    p.betas = rng.normal(0.0, 0.5, template.n_betas)
    return p


SCENE_KINDS = ("hand_on_top", "table", "lift", "grasp", "far")


def random_scene_spec(kind: str, seed: int, template: BodyTemplate | None = None,
                      noise: NoiseModel | None = None, object_name: str | None = None) -> SceneSpec:
    """Seeded scene specs for the standard scene kinds."""
    rng = np.random.default_rng([seed, 7])
    template = template or _shared_template()
    noise = noise or NoiseModel()
    if kind == "hand_on_top":
        name = object_name or ["box", "stool", "chair", "board"][rng.integers(4)]
        body = base_pose(template, "reach", rng)
        R = _ry(rng.uniform(-np.pi, np.pi))
        off = np.array([rng.uniform(-0.05, 0.05), 0.0, rng.uniform(-0.05, 0.05)])
        return SceneSpec(body, name, {}, RigidPose(R, off), "hand_on_top", noise=noise,
                         seed=seed, template=template)
    if kind == "table":
        body = base_pose(template, "reach", rng, arm_tilt=rng.uniform(0.95, 1.1))
        yaw = body.pose[0, 1] + rng.uniform(-0.4, 0.4)
        R = _ry(yaw)
        fwd = R @ np.array([0.0, 0.0, 1.0])
        side = R @ np.array([1.0, 0.0, 0.0])
        # hand lands near the table's near edge, table extends away from the body
        off = fwd * rng.uniform(0.18, 0.24) + side * rng.uniform(-0.15, 0.15)
        return SceneSpec(body, object_name or "table", {}, RigidPose(R, off), "hand_on_top",
                         noise=noise, seed=seed, template=template)
    if kind in ("lift", "grasp"):
        body = base_pose(template, "lift", rng)
        if kind == "grasp":
            noise = dataclasses.replace(noise)
        # flat, deep boxes keep the principal axes well separated whatever width fits the hands
        return SceneSpec(body, object_name or "box", {"height": rng.uniform(0.18, 0.22),
                                                      "depth": rng.uniform(0.40, 0.46)},
                         RigidPose(np.eye(3), np.zeros(3)), kind, noise=noise, seed=seed,
                         template=template)
    if kind == "far":
        body = base_pose(template, "rest", rng)
        R = _ry(rng.uniform(-np.pi, np.pi))
        return SceneSpec(body, object_name or "box", {}, RigidPose(R, [1.2, 0.3, 0.4]), "none",
                         noise=noise, seed=seed, template=template)
    raise ValueError(f"unknown scene kind {kind!r}; known: {SCENE_KINDS}")


def occluded_grasp_spec(seed: int, template: BodyTemplate | None = None,
                        sigma: float = 0.005, dropout: float = 0.1, fraction: float = 0.6,
                        radius: float = 0.15) -> SceneSpec:
    """Lift-pose grasp whose object points near the right hand are dropped at ``fraction``."""
    spec = random_scene_spec("grasp", seed, template, NoiseModel(sigma, dropout))
    tpl = spec.template or _shared_template()
    body_mesh = BodyEvaluation(tpl, spec.body_params, grad=False).mesh()
    center = body_mesh.vertices[_hand_vertices(tpl, "r")].mean(axis=0)
    spec.noise = NoiseModel(sigma, dropout, center, radius, fraction)
    return spec


# ---------------------------------------------------------------------- sequences


def make_sequence(spec: SceneSpec, script: str = "static", n_frames: int = 1,
                  raise_angle: float = 0.6, max_step: float = 0.03) -> list:
    """Frames following a motion script: ``static`` or ``lift_box``.

    For ``lift_box`` both shoulders rotate up by ``raise_angle`` radians with a
    smoothstep profile and the object moves rigidly with the right hand; every
    frame's object translation step is checked against ``max_step`` metres.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    spec = spec.resolved()
    first = generate_scene(spec)
    if script == "static" or n_frames == 1:
        return [first] + [_copy_frame(first) for _ in range(n_frames - 1)]
    if script != "lift_box":
        raise ValueError(f"unknown motion script {script!r}")
    tpl = spec.template
    names = list(tpl.joint_names)
    ls, rs, rh = names.index("l_shoulder"), names.index("r_shoulder"), names.index("r_hand")
    ev0 = BodyEvaluation(tpl, spec.body_params, grad=False)
    G0 = _joint_frame(ev0, rh)
    rel = np.linalg.inv(G0) @ _homog(first.object_pose.R, first.object_pose.t)
    frames = [first]
    prev_t = first.object_pose.t
    for k in range(1, n_frames):
        s = k / (n_frames - 1)
        s = s * s * (3 - 2 * s)
        params = spec.body_params.copy()
        lift = _rx(-raise_angle * s)
        params.pose[ls] = _aa(lift @ rodrigues(params.pose[ls]))
        params.pose[rs] = _aa(lift @ rodrigues(params.pose[rs]))
        ev = BodyEvaluation(tpl, params, grad=False)
        M = _joint_frame(ev, rh) @ rel
        pose = RigidPose(M[:3, :3], M[:3, 3])
        if np.linalg.norm(pose.t - prev_t) > max_step:
            raise UnsatisfiableScene("per-frame object motion exceeds the configured bound")
        prev_t = pose.t
        fspec = dataclasses.replace(spec, body_params=params)
        frames.append(_finish_frame(fspec, ev, ev.mesh(), first.object_template, pose,
                                    first.object_params, first.object_template.transformed(pose.R, pose.t)))
    return frames


def _homog(R, t):
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M


def _joint_frame(ev: BodyEvaluation, j: int) -> np.ndarray:
    A = ev.kin.A[j]
    M = np.eye(4)
    M[:3, :3] = A[:, :3]
    M[:3, 3] = A[:, 3] + ev.params.trans
    return M


def _copy_frame(f: FrameGT) -> FrameGT:
    return dataclasses.replace(f, body_params=f.body_params.copy(), object_pose=f.object_pose.copy(),
                               clouds=list(f.clouds), joints2d=list(f.joints2d),
                               joints2d_visible=list(f.joints2d_visible))
