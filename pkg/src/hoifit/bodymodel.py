"""A self-contained articulated body model with linear blend skinning.

The model has the same functional form as SMPL without pose-corrective blendshapes:
``M(theta, beta)`` poses a shaped template with per-joint axis-angle rotations and a
global translation. Off-surface canonical points are skinned with the weights and
shape displacement of their nearest canonical surface point (zero-bandwidth
diffused skinning).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .geometry import SpatialIndex, TriMesh
from .rotation import canonical_axis_angle, rodrigues, rodrigues_jacobian

JOINT_NAMES = (
    "pelvis", "spine1", "spine2", "spine3", "neck", "head",
    "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
    "l_shoulder", "l_elbow", "l_wrist", "l_hand",
    "r_shoulder", "r_elbow", "r_wrist", "r_hand",
)


@dataclass(frozen=True)
class BodyTemplate:
    """Canonical mesh, kinematic tree, skinning weights, shape basis and regressor.

    ``shapedirs`` has shape (V, 3, B); ``regressor`` maps the (V, 3) shaped vertices
    to the (J, 3) rest joints; ``landmarks`` lists joints used for 2D reprojection.
    """

    vertices: np.ndarray
    faces: np.ndarray
    parents: np.ndarray
    weights: np.ndarray
    regressor: np.ndarray
    shapedirs: np.ndarray
    landmarks: np.ndarray
    joint_names: tuple = field(default=())

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64))
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "regressor", np.asarray(self.regressor, dtype=float))
        object.__setattr__(self, "shapedirs", np.asarray(self.shapedirs, dtype=float))
        object.__setattr__(self, "landmarks", np.asarray(self.landmarks, dtype=np.int64))
        V, J = self.weights.shape
        if self.vertices.shape != (V, 3):
            raise ValueError("weights and vertices disagree on vertex count")
        if parents.shape != (J,) or parents[0] != -1 or np.any(parents[1:] < 0):
            raise ValueError("kinematic tree must have a single root at index 0")
        if np.any(parents[1:] >= np.arange(1, J)):
            raise ValueError("parents must precede children")
        if np.any(self.weights < 0) or np.abs(self.weights.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError("skinning weights must be nonnegative and row-stochastic")
        if self.regressor.shape != (J, V):
            raise ValueError("regressor must be (J, V)")
        if self.shapedirs.ndim != 3 or self.shapedirs.shape[:2] != (V, 3):
            raise ValueError("shapedirs must be (V, 3, B)")
        if not np.all(np.isfinite(self.shapedirs)):
            raise ValueError("shape basis must be finite")
        # regressed joints are linear in beta
        object.__setattr__(self, "_joint_shapedirs",
                           np.einsum("jv,vcb->jcb", self.regressor, self.shapedirs))
        object.__setattr__(self, "_rest_joints", self.regressor @ self.vertices)

    @property
    def n_joints(self) -> int:
        return self.weights.shape[1]

    @property
    def n_betas(self) -> int:
        return self.shapedirs.shape[2]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def mesh(self) -> TriMesh:
        return TriMesh(self.vertices, self.faces)

    @property
    def n_params(self) -> int:
        return 3 * self.n_joints + 3 + self.n_betas

    def shaped_vertices(self, betas) -> np.ndarray:
        return self.vertices + self.shapedirs @ np.asarray(betas, dtype=float)

    def rest_joints(self, betas) -> np.ndarray:
        return self._rest_joints + self._joint_shapedirs @ np.asarray(betas, dtype=float)

    def canonical_index(self) -> SpatialIndex:
        idx = getattr(self, "_canon_index", None)
        if idx is None:
            idx = SpatialIndex(self.mesh)
            object.__setattr__(self, "_canon_index", idx)
        return idx


@dataclass
class BodyParams:
    """Pose (J, 3) axis-angle, global translation (3,) and shape coefficients (B,)."""

    pose: np.ndarray
    trans: np.ndarray
    betas: np.ndarray

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float).reshape(-1, 3)
        self.trans = np.asarray(self.trans, dtype=float).reshape(3)
        self.betas = np.asarray(self.betas, dtype=float).reshape(-1)

    @classmethod
    def zeros(cls, template: BodyTemplate) -> "BodyParams":
        return cls(np.zeros((template.n_joints, 3)), np.zeros(3), np.zeros(template.n_betas))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.pose.ravel(), self.trans, self.betas])

    @classmethod
    def from_vector(cls, x: np.ndarray, n_joints: int) -> "BodyParams":
        x = np.asarray(x, dtype=float)
        return cls(x[:3 * n_joints].reshape(n_joints, 3), x[3 * n_joints:3 * n_joints + 3],
                   x[3 * n_joints + 3:])

    def canonical(self) -> "BodyParams":
        pose = np.array([canonical_axis_angle(w) for w in self.pose])
        return BodyParams(pose, self.trans.copy(), self.betas.copy())

    def copy(self) -> "BodyParams":
        return BodyParams(self.pose.copy(), self.trans.copy(), self.betas.copy())

    def check(self, template: BodyTemplate) -> "BodyParams":
        if self.pose.shape != (template.n_joints, 3) or self.betas.shape != (template.n_betas,):
            raise ValueError(
                f"parameter dimensions {self.pose.shape}/{self.betas.shape} do not match "
                f"template ({template.n_joints} joints, {template.n_betas} betas)")
        if not (np.all(np.isfinite(self.pose)) and np.all(np.isfinite(self.trans))
                and np.all(np.isfinite(self.betas))):
            raise ValueError("body parameters must be finite")
        return self


# --------------------------------------------------------------------------- kinematics


@dataclass
class Kinematics:
    A: np.ndarray            # (J, 3, 4) skinning transforms (rest -> posed, no translation)
    joints: np.ndarray       # (J, 3) posed joints including the global translation
    rest_joints: np.ndarray  # (J, 3)
    dA: np.ndarray = None    # (6J, J, 3, 4) wrt [pose (3J), rest joints (3J)]
    dJ: np.ndarray = None    # (6J, J, 3) posed joints wrt the same variables


def forward_kinematics(template: BodyTemplate, params: BodyParams, grad: bool = False) -> Kinematics:
    """Skinning transforms of every joint, with forward-mode derivatives if requested."""
    J = template.n_joints
    parents = template.parents
    Jr = template.rest_joints(params.betas)
    R = rodrigues(params.pose)
    G = np.zeros((J, 4, 4))
    nv = 6 * J
    dG = np.zeros((nv, J, 4, 4)) if grad else None
    dR = rodrigues_jacobian(params.pose) if grad else None
    for j in range(J):
        L = np.eye(4)
        L[:3, :3] = R[j]
        p = parents[j]
        L[:3, 3] = Jr[j] - (Jr[p] if p >= 0 else 0.0)
        if p < 0:
            G[j] = L
            if grad:
                dG[3 * j:3 * j + 3, j, :3, :3] = dR[j]
                for c in range(3):
                    dG[3 * J + 3 * j + c, j, c, 3] = 1.0
            continue
        G[j] = G[p] @ L
        if grad:
            dG[:, j] = dG[:, p] @ L
            Gr = G[p, :3, :3]
            dG[3 * j:3 * j + 3, j, :3, :3] += Gr @ dR[j]
            for c in range(3):
                dG[3 * J + 3 * j + c, j, :3, 3] += Gr[:, c]
                dG[3 * J + 3 * p + c, j, :3, 3] -= Gr[:, c]
    # translation part as an accumulated displacement so the rest pose maps exactly to itself
    Rm = G[:, :3, :3] - np.eye(3)
    D = np.zeros((J, 3))
    for j in range(1, J):
        p = parents[j]
        D[j] = D[p] + Rm[p] @ (Jr[j] - Jr[p])
    A = G[:, :3, :].copy()
    A[:, :, 3] = D - np.einsum("jab,jb->ja", Rm, Jr)
    joints = G[:, :3, 3] + params.trans
    kin = Kinematics(A, joints, Jr)
    if grad:
        dA = dG[:, :, :3, :].copy()
        dA[:, :, :, 3] -= np.einsum("vjab,jb->vja", dG[:, :, :3, :3], Jr)
        for j in range(J):
            for c in range(3):
                dA[3 * J + 3 * j + c, j, :, 3] -= G[j, :3, c]
        kin.dA = dA
        kin.dJ = dG[:, :, :3, 3].copy()
    return kin


# ----------------------------------------------------------------- surface bindings


class SurfaceBinding:
    """Points expressed on the canonical surface: barycentric mix of vertices + offset.

    A bound point poses as ``sum_k b_k P_k + Lbar @ offset`` where ``P_k`` are posed
    vertices and ``Lbar`` is the barycentric mix of the per-vertex blended linear
    transforms. Vertices themselves are the special case of one-hot weights and zero
    offset.
    """

    def __init__(self, matrix: sparse.csr_matrix, offsets: np.ndarray | None = None):
        self.matrix = sparse.csr_matrix(matrix)
        self.matrix_t = self.matrix.T.tocsr()
        self.offsets = None if offsets is None or not np.any(offsets) else np.asarray(offsets, float)

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_faces(cls, faces: np.ndarray, face_ids: np.ndarray, bary: np.ndarray,
                   n_vertices: int, offsets: np.ndarray | None = None) -> "SurfaceBinding":
        n = len(face_ids)
        rows = np.repeat(np.arange(n), 3)
        cols = faces[face_ids].reshape(-1)
        m = sparse.csr_matrix((bary.reshape(-1), (rows, cols)), shape=(n, n_vertices))
        return cls(m, offsets)

    @classmethod
    def vertices(cls, n_vertices: int) -> "SurfaceBinding":
        return cls(sparse.identity(n_vertices, format="csr"))

    @classmethod
    def canonical_points(cls, template: BodyTemplate, points: np.ndarray) -> "SurfaceBinding":
        """Bind arbitrary canonical points to their nearest canonical surface point."""
        res = template.canonical_index().query(points)
        return cls.from_faces(template.faces, res.faces, res.bary, template.n_vertices,
                              np.asarray(points, float) - res.points)


class BodyEvaluation:
    """One evaluation of the body model with reverse-mode gradient accumulation.

    Energy terms add gradients with respect to posed bound points or posed joints;
    :meth:`gradient` chains them back to the parameter vector
    ``[pose (3J), trans (3), betas (B)]``.
    """

    def __init__(self, template: BodyTemplate, params: BodyParams, grad: bool = True):
        self.template = template
        self.params = params
        self.kin = forward_kinematics(template, params, grad=grad)
        self.shaped = template.shaped_vertices(params.betas)
        V = template.n_vertices
        rest = np.zeros((3, 4))
        rest[:, :3] = np.eye(3)
        dT = (template.weights @ (self.kin.A - rest).reshape(-1, 12)).reshape(V, 3, 4)
        self.T = dT + rest
        self.posed = (self.shaped + np.einsum("vab,vb->va", dT[:, :, :3], self.shaped)
                      + dT[:, :, 3] + params.trans)
        self._grad = grad
        self._gP = np.zeros((V, 3))
        self._gL = np.zeros((V, 9))
        self._gJ = np.zeros((template.n_joints, 3))

    @property
    def joints(self) -> np.ndarray:
        return self.kin.joints

    def mesh(self) -> TriMesh:
        return TriMesh(self.posed, self.template.faces)

    def points(self, binding: SurfaceBinding) -> np.ndarray:
        x = binding.matrix @ self.posed
        if binding.offsets is not None:
            L = (binding.matrix @ self.T[:, :, :3].reshape(-1, 9)).reshape(-1, 3, 3)
            x = x + np.einsum("nab,nb->na", L, binding.offsets)
        return x

    def add_point_grad(self, binding: SurfaceBinding, g: np.ndarray) -> None:
        self._gP += binding.matrix_t @ g
        if binding.offsets is not None:
            outer = (g[:, :, None] * binding.offsets[:, None, :]).reshape(-1, 9)
            self._gL += binding.matrix_t @ outer

    def add_vertex_grad(self, g: np.ndarray) -> None:
        self._gP += g

    def add_joint_grad(self, g: np.ndarray) -> None:
        self._gJ += g

    def gradient(self) -> np.ndarray:
        if not self._grad:
            raise RuntimeError("evaluation was created without gradients")
        tpl = self.template
        J = tpl.n_joints
        kin = self.kin
        gP = self._gP
        gT = np.zeros((tpl.n_vertices, 3, 4))
        gT[:, :, :3] = gP[:, :, None] * self.shaped[:, None, :] + self._gL.reshape(-1, 3, 3)
        gT[:, :, 3] = gP
        gshaped = np.einsum("vab,va->vb", self.T[:, :, :3], gP)
        gA = (tpl.weights.T @ gT.reshape(-1, 12)).reshape(J, 3, 4)
        gvar = np.einsum("vjab,jab->v", kin.dA, gA) + np.einsum("vjc,jc->v", kin.dJ, self._gJ)
        gpose = gvar[:3 * J]
        gJrest = gvar[3 * J:].reshape(J, 3)
        gtrans = gP.sum(axis=0) + self._gJ.sum(axis=0)
        gbeta = (np.einsum("vcb,vc->b", tpl.shapedirs, gshaped)
                 + np.einsum("jcb,jc->b", tpl._joint_shapedirs, gJrest))
        return np.concatenate([gpose, gtrans, gbeta])


# ------------------------------------------------------------------ public operations


def pose_mesh(template: BodyTemplate, params: BodyParams) -> TriMesh:
    params.check(template)
    return BodyEvaluation(template, params, grad=False).mesh()


def skin_point(template: BodyTemplate, c: np.ndarray, params: BodyParams) -> np.ndarray:
    """Pose canonical points (on or off the surface); returns an array shaped like ``c``."""
    params.check(template)
    c = np.asarray(c, dtype=float)
    pts = c.reshape(-1, 3)
    ev = BodyEvaluation(template, params, grad=False)
    return ev.points(SurfaceBinding.canonical_points(template, pts)).reshape(c.shape)


def joints_3d(template: BodyTemplate, params: BodyParams) -> np.ndarray:
    params.check(template)
    return forward_kinematics(template, params).joints


# ------------------------------------------------------------ procedural humanoid


def _frame(d):
    d = d / np.linalg.norm(d)
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(ref, d)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


# (start joint, end joint or end point, radii (u0, w0, u1, w1))
_REST = {
    "pelvis": (0.0, 0.95, 0.0), "spine1": (0.0, 1.08, 0.0), "spine2": (0.0, 1.22, 0.0),
    "spine3": (0.0, 1.38, 0.0), "neck": (0.0, 1.50, 0.0), "head": (0.0, 1.60, 0.0),
    "l_hip": (0.09, 0.90, 0.0), "l_knee": (0.09, 0.50, 0.01), "l_ankle": (0.09, 0.08, 0.0),
    "r_hip": (-0.09, 0.90, 0.0), "r_knee": (-0.09, 0.50, 0.01), "r_ankle": (-0.09, 0.08, 0.0),
    "l_shoulder": (0.19, 1.44, 0.0), "l_elbow": (0.45, 1.44, 0.0), "l_wrist": (0.70, 1.44, 0.0),
    "l_hand": (0.78, 1.44, 0.0),
    "r_shoulder": (-0.19, 1.44, 0.0), "r_elbow": (-0.45, 1.44, 0.0), "r_wrist": (-0.70, 1.44, 0.0),
    "r_hand": (-0.78, 1.44, 0.0),
}
_PARENTS = {
    "pelvis": None, "spine1": "pelvis", "spine2": "spine1", "spine3": "spine2", "neck": "spine3",
    "head": "neck", "l_hip": "pelvis", "l_knee": "l_hip", "l_ankle": "l_knee",
    "r_hip": "pelvis", "r_knee": "r_hip", "r_ankle": "r_knee",
    "l_shoulder": "spine3", "l_elbow": "l_shoulder", "l_wrist": "l_elbow", "l_hand": "l_wrist",
    "r_shoulder": "spine3", "r_elbow": "r_shoulder", "r_wrist": "r_elbow", "r_hand": "r_wrist",
}


def _segments():
    segs = [
        ("pelvis", "spine1", (0.15, 0.11, 0.14, 0.10)),
        ("spine1", "spine2", (0.14, 0.10, 0.15, 0.10)),
        ("spine2", "spine3", (0.15, 0.10, 0.16, 0.10)),
        ("spine3", "neck", (0.16, 0.10, 0.06, 0.05)),
        ("neck", "head", (0.05, 0.05, 0.06, 0.06)),
        ("head", (0.0, 1.84, 0.02), (0.09, 0.10, 0.05, 0.06)),
    ]
    for s in ("l", "r"):
        sx = 1.0 if s == "l" else -1.0
        segs += [
            (f"{s}_hip", f"{s}_knee", (0.075, 0.075, 0.055, 0.055)),
            (f"{s}_knee", f"{s}_ankle", (0.05, 0.05, 0.04, 0.04)),
            (f"{s}_ankle", (0.09 * sx, 0.03, 0.17), (0.04, 0.035, 0.035, 0.02)),
            ("spine3", f"{s}_shoulder", (0.05, 0.05, 0.05, 0.05)),
            (f"{s}_shoulder", f"{s}_elbow", (0.05, 0.05, 0.04, 0.04)),
            (f"{s}_elbow", f"{s}_wrist", (0.04, 0.04, 0.03, 0.03)),
            (f"{s}_wrist", f"{s}_hand", (0.045, 0.02, 0.045, 0.02)),
            (f"{s}_hand", (0.88 * sx, 1.44, 0.0), (0.045, 0.015, 0.035, 0.012)),
        ]
    return segs


def default_template(n_around: int = 12, ring_spacing: float = 0.05) -> BodyTemplate:
    """Procedural humanoid in a T-pose (y up, facing +z), 20 joints, 10 shape directions."""
    names = list(JOINT_NAMES)
    jid = {n: i for i, n in enumerate(names)}
    rest = np.array([_REST[n] for n in names])
    parents = np.array([-1 if _PARENTS[n] is None else jid[_PARENTS[n]] for n in names])
    J = len(names)
    verts, faces, weights = [], [], []
    seg_of, axis_pt, start_ring = [], [], {}
    phis = 2 * np.pi * np.arange(n_around) / n_around

    for si, (a, b, radii) in enumerate(_segments()):
        ja = jid[a]
        p0 = rest[ja]
        if isinstance(b, str):
            jb = jid[b]
            p1 = rest[jb]
        else:
            jb = None
            p1 = np.asarray(b, float)
        d = p1 - p0
        length = np.linalg.norm(d)
        u, w = _frame(d)
        if a == "spine3" and b in ("l_shoulder", "r_shoulder"):
            u, w = np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])
        if a.endswith(("_wrist", "_hand")):
            # flat hand: wide along z, thin along y
            u, w = np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0])
        if (jb is not None and jb <= 5) or a == "head":
            u, w = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
        n_rings = max(3, int(round(length / ring_spacing)) + 1)
        base = len(verts)
        pa = parents[ja]
        for r in range(n_rings):
            s = r / (n_rings - 1)
            ru = radii[0] + s * (radii[2] - radii[0])
            rw = radii[1] + s * (radii[3] - radii[1])
            center = p0 + s * d
            wt = np.zeros(J)
            wt[ja] = 1.0
            if pa >= 0 and s < 0.25:
                f = 0.5 * (1.0 - s / 0.25)
                wt[pa] += f
                wt[ja] -= f
            if jb is not None and s > 0.75:
                f = 0.5 * (s - 0.75) / 0.25
                wt[jb] += f
                wt[ja] -= f
            for phi in phis:
                verts.append(center + ru * np.cos(phi) * u + rw * np.sin(phi) * w)
                weights.append(wt)
                seg_of.append(si)
                axis_pt.append(center)
        if a not in start_ring:
            start_ring[a] = np.arange(base, base + n_around)
        for r in range(n_rings - 1):
            for k in range(n_around):
                k2 = (k + 1) % n_around
                i0, i1 = base + r * n_around + k, base + r * n_around + k2
                j0, j1 = i0 + n_around, i1 + n_around
                faces += [(i0, i1, j1), (i0, j1, j0)]
        # caps
        for end, ring in ((0, 0), (1, n_rings - 1)):
            c = len(verts)
            center = p0 + end * d
            verts.append(center)
            weights.append(weights[base + ring * n_around])
            seg_of.append(si)
            axis_pt.append(center)
            for k in range(n_around):
                k2 = (k + 1) % n_around
                i0, i1 = base + ring * n_around + k, base + ring * n_around + k2
                faces.append((c, i1, i0) if end == 0 else (c, i0, i1))

    verts = np.asarray(verts)
    weights = np.asarray(weights)
    V = len(verts)
    regressor = np.zeros((J, V))
    for n, ring in start_ring.items():
        regressor[jid[n], ring] = 1.0 / len(ring)

    seg_names = [(a, b) for a, b, _ in _segments()]
    seg_start = np.array([seg_names[s][0] for s in seg_of])
    radial = verts - np.asarray(axis_pt)
    arm = np.array([n.split("_")[-1] in ("shoulder", "elbow", "wrist", "hand")
                    and not (n == "spine3") for n in seg_start])
    arm |= np.array([seg_names[s][0] == "spine3" and seg_names[s][1] != "neck" for s in seg_of])
    leg = np.array([n.split("_")[-1] in ("hip", "knee", "ankle") for n in seg_start])
    torso = ~arm & ~leg
    side = np.sign(verts[:, 0])
    pelvis_y = rest[jid["pelvis"]][1]
    neck_y = rest[jid["neck"]][1]

    S = np.zeros((V, 3, 10))
    S[:, :, 0] = 0.04 * verts                                          # stature
    S[:, :, 1] = 0.10 * radial                                         # girth
    hip = np.where(side[:, None] > 0, rest[jid["l_hip"]], rest[jid["r_hip"]])
    S[leg, :, 2] = 0.06 * (verts[leg] - hip[leg])                      # leg length
    sh = np.where(side[:, None] > 0, rest[jid["l_shoulder"]], rest[jid["r_shoulder"]])
    arm_only = arm & ~np.array([seg_names[s][0] == "spine3" for s in seg_of])
    S[arm_only, :, 3] = 0.06 * (verts[arm_only] - sh[arm_only])        # arm length
    above = verts[:, 1] > pelvis_y
    lift = np.clip(verts[:, 1] - pelvis_y, 0.0, neck_y - pelvis_y)
    S[above & ~leg, 1, 4] = 0.10 * lift[above & ~leg]                  # torso length
    S[arm, 0, 5] = 0.03 * side[arm]                                    # shoulder width
    S[leg, 0, 6] = 0.02 * side[leg]                                    # hip width
    front = torso & (radial[:, 2] > 0) & (verts[:, 1] < neck_y)
    S[front, 2, 7] = 0.15 * radial[front, 2]                           # belly
    S[arm, :, 8] = 0.15 * radial[arm]                                  # arm girth
    S[leg, :, 9] = 0.15 * radial[leg]                                  # leg girth

    # segments meet on coincident seam rings; give each seam one blend so it cannot crack
    groups = _coincident_groups(verts)
    for g in groups:
        S[g] = S[g].mean(axis=0)
        weights[g] = weights[g].mean(axis=0)

    landmarks = np.array([jid[n] for n in (
        "pelvis", "neck", "head", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
        "l_shoulder", "l_elbow", "l_wrist", "l_hand", "r_shoulder", "r_elbow", "r_wrist",
        "r_hand")])
    return BodyTemplate(verts, np.asarray(faces), parents, weights, regressor, S, landmarks,
                        tuple(names))


def _coincident_groups(points: np.ndarray, tol: float = 1e-9) -> list:
    from scipy.sparse.csgraph import connected_components
    from scipy.spatial import cKDTree

    pairs = cKDTree(points).query_pairs(tol, output_type="ndarray")
    if not len(pairs):
        return []
    n = len(points)
    adj = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, label = connected_components(adj, directed=False)
    sizes = np.bincount(label)
    return [np.flatnonzero(label == k) for k in np.flatnonzero(sizes > 1)]


# ------------------------------------------------------------------ template files

_MAGIC = b"HOIBODY1"


def save_template(template: BodyTemplate, path) -> None:
    """Binary container: magic, int64 counts (J, B, V, F, K), then little-endian sections.

    Sections in order: vertices (V*3 f8), faces (F*3 i8), parents (J i8), weights
    (V*J f8), regressor (J*V f8), shape basis (V*3*B f8), landmarks (K i8).
    """
    t = template
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<5q", t.n_joints, t.n_betas, t.n_vertices, len(t.faces),
                             len(t.landmarks)))
        for arr, dt in ((t.vertices, "<f8"), (t.faces, "<i8"), (t.parents, "<i8"),
                        (t.weights, "<f8"), (t.regressor, "<f8"), (t.shapedirs, "<f8"),
                        (t.landmarks, "<i8")):
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_template(path) -> BodyTemplate:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a body template file")
    J, B, V, F, K = struct.unpack_from("<5q", data, 8)
    off = 48
    out = []
    for count, dt, shape in ((V * 3, "<f8", (V, 3)), (F * 3, "<i8", (F, 3)), (J, "<i8", (J,)),
                             (V * J, "<f8", (V, J)), (J * V, "<f8", (J, V)),
                             (V * 3 * B, "<f8", (V, 3, B)), (K, "<i8", (K,))):
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(shape)
        out.append(arr.copy())
        off += 8 * count
    if off != len(data):
        raise ValueError(f"{path}: trailing or missing bytes")
    return BodyTemplate(*out, joint_names=tuple(JOINT_NAMES) if J == len(JOINT_NAMES) else ())


def dump_template_ascii(template: BodyTemplate, fh) -> None:
    """Human-readable dump of every section, for debugging."""
    t = template
    fh.write(f"joints {t.n_joints} betas {t.n_betas} vertices {t.n_vertices} "
             f"faces {len(t.faces)} landmarks {len(t.landmarks)}\n")
    for j in range(t.n_joints):
        name = t.joint_names[j] if t.joint_names else str(j)
        fh.write(f"joint {j} {name} parent {t.parents[j]}\n")
    for i, v in enumerate(t.vertices):
        w = " ".join(f"{x:.6g}" for x in t.weights[i])
        fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} w {w}\n")
    for f in t.faces:
        fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
    fh.write("landmarks " + " ".join(str(k) for k in t.landmarks) + "\n")
