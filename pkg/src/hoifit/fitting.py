"""Staged joint registration of the body model and a rigid object.

The total objective is

    E = E_smpl(theta, beta) + E_obj(R, t) + w_contact * E_contact(theta, beta, R, t)

with the body term built from a point-to-mesh distance, a correspondence term through
the diffused skinning function, 2D joint reprojection and L2 priors, the object term
from a point-to-mesh distance plus the unsigned distance field evaluated at the posed
template vertices, and the contact term pulling detected object vertices onto their
predicted body correspondences. All gradients are analytic.

Distance-like residuals go through a pseudo-Huber smoothing ``sqrt(r^2 + s^2) - s``
(``smoothing`` in :class:`FitConfig`); the zero-residual fixed point is unaffected and
``smoothing=0`` recovers plain absolute values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.optimize import minimize

from .bodymodel import BodyEvaluation, BodyParams, BodyTemplate, SurfaceBinding
from .errors import AmbiguousOrientation, FlaggedNumericalFault, NoNearSurfacePoints
from .fields import EPS_CONTACT, FieldProvider, FieldSamples, aggregate_orientation, \
    compute_orientation, relative_rotation
from .geometry import RigidPose, SpatialIndex, TriMesh
from .rotation import rodrigues, rodrigues_jacobian
from .validation import check_points

logger = logging.getLogger(__name__)

TERMS = ("d", "corr", "j2d", "pose", "shape", "obj_d", "obj_udf", "contact")


# --------------------------------------------------------------------------- config


@dataclass
class FitConfig:
    """Term weights, sampling sizes and the optimization schedule."""

    w_d: float = 1.0
    w_corr: float = 1.0
    w_j2d: float = 1e-3
    w_pose: float = 1e-4
    w_shape: float = 1e-4
    w_obj_d: float = 1.0
    w_obj_udf: float = 1.0
    w_contact: float = 1.0
    n_query: int = 30000
    eps: float = EPS_CONTACT
    near_sigma: float = 0.02
    corr_band: float = 0.1
    bounds_margin: float = 0.1
    n_human_points: int = 3000
    n_object_points: int = 2000
    smoothing: float = 1e-3
    j2d_robust: float | None = None
    stage_iters: tuple = (100, 300, 200)
    ftol: float = 1e-11
    gtol: float = 1e-8
    orientation_init: bool = True
    precondition: bool = True
    seed: int = 0

    def check(self) -> "FitConfig":
        for name in ("w_d", "w_corr", "w_j2d", "w_pose", "w_shape", "w_obj_d", "w_obj_udf",
                     "w_contact", "smoothing"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be a finite nonnegative number, got {v}")
        if self.n_query <= 0:
            raise ValueError("n_query must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if len(self.stage_iters) != 3 or min(self.stage_iters) < 0:
            raise ValueError("stage_iters needs three nonnegative counts")
        return self

    @classmethod
    def from_dict(cls, values: dict) -> "FitConfig":
        from .io import parse_value

        known = {f.name: f for f in fields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in known:
                raise ValueError(f"unknown fit option {k!r}")
            v = parse_value(v) if isinstance(v, str) else v
            if k == "stage_iters":
                v = tuple(int(x) for x in np.atleast_1d(v))
            elif k in ("orientation_init", "precondition"):
                v = bool(v)
            elif k in ("n_query", "n_human_points", "n_object_points", "seed"):
                v = int(v)
            elif k == "j2d_robust":
                v = None if v is None or v in ("none", "None", "") else float(v)
            else:
                v = float(v)
            kw[k] = v
        return cls(**kw).check()

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ------------------------------------------------------------------------ containers


@dataclass
class ContactSet:
    """Frozen contacts: object vertex indices and canonical body targets."""

    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    targets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1, 3)
        if len(self.indices) != len(self.targets):
            raise ValueError("contact indices and targets differ in length")

    def __len__(self) -> int:
        return len(self.indices)

    def indicator(self, n_vertices: int) -> np.ndarray:
        out = np.zeros(n_vertices, dtype=bool)
        out[self.indices] = True
        return out

    def binding(self, template: BodyTemplate) -> SurfaceBinding:
        return SurfaceBinding.canonical_points(template, self.targets)


@dataclass
class FitResult:
    body_params: BodyParams | None
    object_pose: RigidPose | None
    contacts: ContactSet
    history: list = field(default_factory=list)
    converged: dict = field(default_factory=dict)
    iterations: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def final_energy(self) -> float:
        return self.history[-1]["total"] if self.history else float("nan")

    @property
    def total_iterations(self) -> int:
        return int(sum(self.iterations.values()))


@dataclass
class FrameData:
    """Observations of one frame; :class:`hoifit.synth.FrameGT` satisfies this shape."""

    cloud: object
    cameras: list = field(default_factory=list)
    joints2d: list = field(default_factory=list)
    joints2d_visible: list = field(default_factory=list)


# ------------------------------------------------------------------------- helpers


def _rho(r, s):
    """Smoothed absolute value and its derivative."""
    if s <= 0:
        return np.abs(r), np.sign(r)
    q = np.sqrt(r * r + s * s)
    return q - s, r / q


def _scatter_faces(faces, face_ids, bary, g, n_vertices):
    """Distribute per-point gradients onto mesh vertices with barycentric weights."""
    idx = faces[face_ids].reshape(-1)
    w = (bary[:, :, None] * g[:, None, :]).reshape(-1, 3)
    return np.stack([np.bincount(idx, w[:, c], minlength=n_vertices) for c in range(3)], axis=1)


def _point_to_mesh_term(points, mesh, s):
    """Mean smoothed point-to-surface distance and its gradient on mesh vertices."""
    n = len(points)
    if n == 0:
        return 0.0, np.zeros_like(mesh.vertices)
    res = SpatialIndex(mesh).query(points)
    d = res.distances
    val, dval = _rho(d, s)
    diff = points - res.points
    safe = np.where(d > 0, d, 1.0)
    g_q = -(dval / safe)[:, None] * diff / n
    g_q[d <= 0] = 0.0
    return float(val.mean()), _scatter_faces(mesh.faces, res.faces, res.bary, g_q, mesh.n_vertices)


def _rotation_grad(gV, W, omega, R_ref):
    """Chain vertex gradients of ``V = exp(omega) R_ref W + t`` to ``omega``."""
    dR = rodrigues_jacobian(omega)
    base = W @ R_ref.T
    return np.array([np.sum(gV * (base @ dR[i].T)) for i in range(3)])


# ----------------------------------------------------------------------- body terms


class BodyTerms:
    """Precomputed data for the body energy of one frame."""

    def __init__(self, template: BodyTemplate, cloud_h: np.ndarray, query_points=None,
                 samples: FieldSamples | None = None, cameras=(), joints2d=(), visible=(),
                 config: FitConfig | None = None):
        self.template = template
        self.config = config or FitConfig()
        self.cloud_h = check_points(cloud_h)
        self.cameras = list(cameras)
        self.joints2d = [np.asarray(j, float) for j in joints2d]
        self.visible = ([np.asarray(v, bool) for v in visible] if len(visible)
                        else [np.isfinite(j).all(axis=1) for j in self.joints2d])
        self.n_pairs = int(sum(v.sum() for v in self.visible))
        self.p = np.zeros((0, 3))
        self.u_h = np.zeros(0)
        self.binding = None
        if query_points is not None and samples is not None:
            keep = np.isfinite(samples.u_h) & (samples.u_h < self.config.corr_band)
            self.p = check_points(query_points)[keep]
            self.u_h = np.asarray(samples.u_h)[keep]
            if keep.any():
                self.binding = SurfaceBinding.canonical_points(template, np.asarray(samples.c)[keep])

    def evaluate(self, ev: BodyEvaluation, out: dict, data: bool = True) -> np.ndarray:
        """Add body terms to ``out``; gradients w.r.t. points go into ``ev``.

        Returns the gradient contribution that acts on the parameter vector directly
        (the priors).
        """
        cfg = self.config
        tpl = self.template
        s = cfg.smoothing
        x = ev.params
        gdirect = np.zeros(tpl.n_params)
        if data and cfg.w_d > 0 and len(self.cloud_h):
            val, gV = _point_to_mesh_term(self.cloud_h, ev.mesh(), s)
            out["d"] = cfg.w_d * val
            ev.add_vertex_grad(cfg.w_d * gV)
        if data and cfg.w_corr > 0 and self.binding is not None:
            y = ev.points(self.binding)
            diff = self.p - y
            nrm = np.linalg.norm(diff, axis=1)
            val, dval = _rho(nrm - self.u_h, s)
            safe = np.where(nrm > 0, nrm, 1.0)
            g = -(cfg.w_corr / len(y)) * (dval / safe)[:, None] * diff
            g[nrm <= 0] = 0.0
            out["corr"] = cfg.w_corr * float(val.mean())
            ev.add_point_grad(self.binding, g)
        if cfg.w_j2d > 0 and self.n_pairs:
            J = ev.joints[tpl.landmarks]
            total = 0.0
            gJ = np.zeros_like(J)
            for cam, obs, vis in zip(self.cameras, self.joints2d, self.visible):
                uv, ok = cam.project(J)
                m = vis & ok
                if not m.any():
                    continue
                r = uv[m] - obs[m]
                r2 = np.sum(r * r, axis=1)
                if cfg.j2d_robust:
                    c2 = cfg.j2d_robust ** 2
                    total += float(np.sum(c2 * r2 / (r2 + c2)))
                    scale = 2.0 * c2**2 / (r2 + c2) ** 2
                else:
                    total += float(r2.sum())
                    scale = np.full(len(r2), 2.0)
                Jp = cam.project_jacobian(J[m])
                gJ[m] += np.einsum("nab,na->nb", Jp, scale[:, None] * r)
            out["j2d"] = cfg.w_j2d * total / self.n_pairs
            gfull = np.zeros((tpl.n_joints, 3))
            np.add.at(gfull, tpl.landmarks, gJ * cfg.w_j2d / self.n_pairs)
            ev.add_joint_grad(gfull)
        J3 = 3 * tpl.n_joints
        if cfg.w_pose > 0:
            th = x.pose[1:].reshape(-1)
            out["pose"] = cfg.w_pose * float(th @ th)
            gdirect[3:J3] += 2.0 * cfg.w_pose * th
        if cfg.w_shape > 0:
            out["shape"] = cfg.w_shape * float(x.betas @ x.betas)
            gdirect[J3 + 3:] += 2.0 * cfg.w_shape * x.betas
        return gdirect


def energy_smpl(params: BodyParams, template: BodyTemplate, cloud_h: np.ndarray,
                query_points=None, samples: FieldSamples | None = None, cameras=(),
                joints2d=(), visible=(), config: FitConfig | None = None):
    """Body energy: returns ``(value, gradient over [pose, trans, betas], breakdown)``."""
    terms = BodyTerms(template, cloud_h, query_points, samples, cameras, joints2d, visible, config)
    ev = BodyEvaluation(template, params)
    out = {}
    gd = terms.evaluate(ev, out)
    return float(sum(out.values())), ev.gradient() + gd, out


# --------------------------------------------------------------------- object terms


class ObjectTerms:
    def __init__(self, template: TriMesh, cloud_o: np.ndarray, provider: FieldProvider | None,
                 config: FitConfig | None = None):
        self.template = template
        self.cloud_o = check_points(cloud_o)
        self.provider = provider
        self.config = config or FitConfig()

    def evaluate(self, V: np.ndarray, out: dict) -> np.ndarray:
        """Add object terms for posed vertices ``V``; returns the gradient on ``V``."""
        cfg = self.config
        gV = np.zeros_like(V)
        if cfg.w_obj_d > 0 and len(self.cloud_o):
            val, g = _point_to_mesh_term(self.cloud_o, TriMesh(V, self.template.faces), cfg.smoothing)
            out["obj_d"] = cfg.w_obj_d * val
            gV += cfg.w_obj_d * g
        if cfg.w_obj_udf > 0 and self.provider is not None:
            smp = self.provider.query(V, grad=True)
            u = np.asarray(smp.u_o)
            if np.all(np.isfinite(u)):
                val, dval = _rho(u, cfg.smoothing)
                out["obj_udf"] = cfg.w_obj_udf * float(val.mean())
                gV += (cfg.w_obj_udf / len(V)) * dval[:, None] * smp.grad_u_o
        return gV


def energy_obj(pose: RigidPose, template: TriMesh, cloud_o: np.ndarray,
               provider: FieldProvider | None, config: FitConfig | None = None):
    """Object energy; gradients are w.r.t. a rotation increment ``omega``
    (``R <- exp(omega) R``) and the translation. Returns ``(value, (g_omega, g_t), breakdown)``."""
    terms = ObjectTerms(template, cloud_o, provider, config)
    V = pose.apply(template.vertices)
    out = {}
    gV = terms.evaluate(V, out)
    return (float(sum(out.values())),
            (_rotation_grad(gV, template.vertices, np.zeros(3), pose.R), gV.sum(axis=0)), out)


def energy_contact(params: BodyParams, pose: RigidPose, contacts: ContactSet,
                   template: BodyTemplate, object_template: TriMesh, smoothing: float = 0.0):
    """Mean distance between contact vertices and their skinned correspondences.

    Returns ``(value, g_body, (g_omega, g_t))``; an empty set gives zeros.
    """
    ev = BodyEvaluation(template, params)
    out = {}
    gV = np.zeros_like(object_template.vertices)
    V = pose.apply(object_template.vertices)
    _contact_term(ev, V, contacts, contacts.binding(template) if len(contacts) else None,
                  1.0, smoothing, out, gV)
    return (out.get("contact", 0.0), ev.gradient(),
            (_rotation_grad(gV, object_template.vertices, np.zeros(3), pose.R), gV.sum(axis=0)))


def _contact_term(ev, V, contacts, binding, weight, smoothing, out, gV):
    if not len(contacts) or weight <= 0:
        return
    y = ev.points(binding)
    diff = V[contacts.indices] - y
    d = np.linalg.norm(diff, axis=1)
    val, dval = _rho(d, smoothing)
    safe = np.where(d > 0, d, 1.0)
    g = (weight / len(d)) * (dval / safe)[:, None] * diff
    g[d <= 0] = 0.0
    out["contact"] = weight * float(val.mean())
    np.add.at(gV, contacts.indices, g)
    ev.add_point_grad(binding, -g)


# ------------------------------------------------------------- init and contacts


def init_object(template: TriMesh, current: RigidPose, provider: FieldProvider,
                query_points: np.ndarray, config: FitConfig | None = None,
                samples: FieldSamples | None = None):
    """Orientation initialization from the predicted orientation field.

    The object is rotated about its current centroid, so the translation estimate is
    kept. Returns ``(pose, flag)`` where ``flag`` is None on success or a short reason
    when the current pose is returned unchanged.
    """
    cfg = config or FitConfig()
    if samples is None:
        samples = provider.query(query_points)
    try:
        a_pred = aggregate_orientation(samples, cfg.eps)
        a_curr = compute_orientation(current.apply(template.vertices))
        R_rel = relative_rotation(a_pred, a_curr)
    except (NoNearSurfacePoints, AmbiguousOrientation, ValueError) as exc:
        return current.copy(), f"orientation_init_skipped:{type(exc).__name__}"
    R = R_rel @ current.R
    U, _, Vt = np.linalg.svd(R)
    R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
    m = template.vertices.mean(axis=0)
    t = current.apply(m[None])[0] - R @ m
    return RigidPose(R, t), None


def detect_contacts(pose: RigidPose, template: TriMesh, provider: FieldProvider,
                    eps: float = EPS_CONTACT) -> ContactSet:
    """Object vertices with both predicted distances below ``eps``."""
    V = pose.apply(template.vertices)
    smp = provider.query(V)
    mask = (np.asarray(smp.u_o) < eps) & (np.asarray(smp.u_h) < eps)
    idx = np.nonzero(mask)[0]
    return ContactSet(idx, np.asarray(smp.c)[idx])


def sample_query_points(cloud: np.ndarray, n: int, seed=0, sigma: float = 0.02,
                        margin: float = 0.1) -> np.ndarray:
    """Half near-surface perturbations of the cloud, half uniform in its padded bounds."""
    cloud = check_points(cloud, allow_empty=False)
    rng = np.random.default_rng(seed)
    n_near = n // 2
    near = cloud[rng.integers(0, len(cloud), n_near)] + rng.normal(0.0, sigma, (n_near, 3))
    lo = cloud.min(axis=0) - margin
    hi = cloud.max(axis=0) + margin
    uni = lo + rng.random((n - n_near, 3)) * (hi - lo)
    return np.concatenate([near, uni])


# ------------------------------------------------------------------------- problem


class _Problem:
    """Packs the active blocks into one vector for the optimizer."""

    def __init__(self, body_terms, object_terms, template, object_template, R_ref,
                 contacts=None, data=True, fit_body=True, fit_object=True):
        self.bt = body_terms
        self.ot = object_terms
        self.template = template
        self.otpl = object_template
        self.R_ref = R_ref
        self.contacts = contacts if contacts is not None else ContactSet()
        self.binding = (self.contacts.binding(template) if len(self.contacts) else None)
        self.data = data
        self.fit_body = fit_body
        self.fit_object = fit_object and object_template is not None
        self.nb = template.n_params if fit_body else 0
        self.fixed_body = None
        self.fixed_pose = None
        self.last = None

    def unpack(self, x):
        body = (BodyParams.from_vector(x[:self.nb], self.template.n_joints) if self.fit_body
                else self.fixed_body)
        if self.fit_object:
            omega = x[self.nb:self.nb + 3]
            pose = RigidPose(rodrigues(omega) @ self.R_ref, x[self.nb + 3:self.nb + 6].copy())
        else:
            omega, pose = None, self.fixed_pose
        return body, omega, pose

    def __call__(self, x):
        body, omega, pose = self.unpack(x)
        out = {}
        g = np.zeros_like(x)
        need_body = self.fit_body or (self.binding is not None)
        ev = BodyEvaluation(self.template, body, grad=self.fit_body) if need_body and body is not None \
            else None
        gV = None
        V = None
        if pose is not None and self.otpl is not None:
            V = pose.apply(self.otpl.vertices)
            gV = np.zeros_like(V)
            if self.fit_object and self.data and self.ot is not None:
                gV += self.ot.evaluate(V, out)
        if self.binding is not None and ev is not None and V is not None:
            _contact_term(ev, V, self.contacts, self.binding, self.bt.config.w_contact,
                          self.bt.config.smoothing, out, gV)
        if self.fit_body:
            gd = self.bt.evaluate(ev, out, data=self.data)
            g[:self.nb] = ev.gradient() + gd
        if self.fit_object:
            g[self.nb:self.nb + 3] = _rotation_grad(gV, self.otpl.vertices, omega, self.R_ref)
            g[self.nb + 3:self.nb + 6] = gV.sum(axis=0)
        total = float(sum(out.values()))
        if not np.isfinite(total) or not np.all(np.isfinite(g)):
            raise FlaggedNumericalFault(f"non-finite energy or gradient: {out}")
        out["total"] = total
        self.last = (x.copy(), out)
        return total, g

    def pack(self, body, pose):
        parts = []
        if self.fit_body:
            parts.append(body.to_vector())
        if self.fit_object:
            parts.append(np.zeros(3))
            parts.append(np.asarray(pose.t, float))
        return np.concatenate(parts) if parts else np.zeros(0)


def _vertex_jacobian_gram(problem: _Problem, x0) -> np.ndarray:
    """Block-diagonal ``J^T J / n`` of posed vertices w.r.t. the packed parameters."""
    n = len(x0)
    H = np.zeros((n, n))
    nb = problem.nb
    if nb:
        tpl = problem.template
        J = tpl.n_joints
        h = 1e-6
        cols = []
        for i in range(nb):
            e = np.zeros(nb)
            e[i] = h
            hi = BodyEvaluation(tpl, BodyParams.from_vector(x0[:nb] + e, J), grad=False).posed
            lo = BodyEvaluation(tpl, BodyParams.from_vector(x0[:nb] - e, J), grad=False).posed
            cols.append(((hi - lo) / (2 * h)).ravel())
        Jb = np.stack(cols, axis=1)
        H[:nb, :nb] = Jb.T @ Jb / tpl.n_vertices
    if problem.fit_object:
        W = problem.otpl.vertices
        base = W @ problem.R_ref.T
        dR = rodrigues_jacobian(x0[nb:nb + 3])
        Jo = np.concatenate([np.stack([(base @ dR[i].T).ravel() for i in range(3)], axis=1),
                             np.tile(np.eye(3), (len(W), 1))], axis=1)
        H[nb:, nb:] = Jo.T @ Jo / len(W)
    return H


def _preconditioner(problem: _Problem, x0) -> np.ndarray:
    """``S`` with ``S^T H S = I`` for the damped vertex Gram matrix ``H``.

    The optimizer runs on ``z`` with ``x = x0 + S z``: the objective and its exact
    gradient are unchanged, only the coordinates in which L-BFGS builds its curvature
    model are better scaled across the kinematic chain, shape and object blocks.
    """
    H = _vertex_jacobian_gram(problem, x0)
    # damping keeps directions the vertices barely see (leaf twists, weak shape
    # components) from being stretched so far that the priors become stiff
    H = H + np.eye(len(H)) * 1e-2 * float(np.diag(H).mean())
    L = np.linalg.cholesky(H)
    return np.linalg.solve(L.T, np.eye(len(x0)))


def _run_stage(problem: _Problem, x0, max_iter, cfg, stage, history):
    if max_iter <= 0 or len(x0) == 0:
        return x0, True, 0
    f0, _ = problem(x0)
    row = dict(problem.last[1])
    history.append({"stage": stage, "iter": 0, **row})
    count = [0]
    S = _preconditioner(problem, x0) if cfg.precondition else np.eye(len(x0))

    def fun(z):
        f, g = problem(x0 + S @ z)
        return f, S.T @ g

    def callback(zk):
        count[0] += 1
        xk = x0 + S @ zk
        if problem.last is None or not np.array_equal(problem.last[0], xk):
            problem(xk)
        history.append({"stage": stage, "iter": count[0], **problem.last[1]})

    res = minimize(fun, np.zeros(len(x0)), jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxiter": int(max_iter), "maxfun": int(4 * max_iter + 20),
                            "ftol": cfg.ftol, "gtol": cfg.gtol, "maxcor": 20})
    x = x0 + S @ res.x
    # never return a worse point than the start
    if res.fun > f0:
        x = x0
    return x, bool(res.success), count[0]


# ------------------------------------------------------------------------- fit_frame


def _initial_body(template: BodyTemplate, cloud_h: np.ndarray) -> BodyParams:
    p = BodyParams.zeros(template)
    if len(cloud_h):
        rest = template.vertices
        p.trans = cloud_h.mean(axis=0) - rest.mean(axis=0)
        p.trans[1] = cloud_h[:, 1].min() - rest[:, 1].min()
    return p


def fit_frame(frame, provider: FieldProvider | None, template: BodyTemplate,
              object_template: TriMesh | None, init=None, config: FitConfig | None = None,
              stages=(0, 1, 2)) -> FitResult:
    """Fit body and object to one frame.

    ``init`` may be a :class:`FitResult` or a ``(BodyParams, RigidPose)`` pair; without
    it the body starts from the rest pose at the human cloud and is first driven by the
    2D joints and priors (stage 0). Stage 1 fits body and object independently; stage 2
    freezes contacts and adds the contact term.
    """
    cfg = (config or FitConfig()).check()
    flags = []
    cloud = frame.cloud
    rng = np.random.default_rng([cfg.seed, 11])
    S_h = cloud.human
    S_o = cloud.object
    if len(S_h) > cfg.n_human_points:
        S_h = S_h[np.sort(rng.choice(len(S_h), cfg.n_human_points, replace=False))]
    if len(S_o) > cfg.n_object_points:
        S_o = S_o[np.sort(rng.choice(len(S_o), cfg.n_object_points, replace=False))]
    has_h = len(S_h) > 0
    has_o = len(S_o) > 0 and object_template is not None
    if not has_h:
        flags.append("missing_human")
    if not has_o:
        flags.append("missing_object")
    if not has_h and not has_o:
        raise ValueError("frame has neither human nor object points")

    if init is not None:
        if isinstance(init, FitResult):
            body0, pose0 = init.body_params, init.object_pose
        else:
            body0, pose0 = init
        body0 = body0.copy() if body0 is not None else _initial_body(template, S_h)
        pose0 = pose0.copy() if pose0 is not None else None
    else:
        body0 = _initial_body(template, S_h)
        pose0 = None
    if has_o and pose0 is None:
        pose0 = RigidPose(np.eye(3), S_o.mean(axis=0) - object_template.vertices.mean(axis=0))

    all_pts = np.concatenate([S_h, S_o]) if has_o else S_h
    Q = sample_query_points(all_pts, cfg.n_query, seed=[cfg.seed, 13], sigma=cfg.near_sigma,
                            margin=cfg.bounds_margin)
    samples = provider.query(Q) if provider is not None else None

    bt = BodyTerms(template, S_h, Q if samples is not None else None, samples,
                   getattr(frame, "cameras", ()), getattr(frame, "joints2d", ()),
                   getattr(frame, "joints2d_visible", ()), cfg)
    ot = ObjectTerms(object_template, S_o, provider, cfg) if has_o else None
    history = []
    converged, iterations = {}, {}
    body, pose = body0, pose0

    # stage 0: 2D joints and priors, only without an initial body
    if 0 in stages and init is None and has_h and bt.n_pairs:
        prob = _Problem(bt, None, template, None, None, data=False, fit_object=False)
        x, converged[0], iterations[0] = _run_stage(prob, prob.pack(body, None), cfg.stage_iters[0],
                                                    cfg, 0, history)
        body = prob.unpack(x)[0]
    if has_o and cfg.orientation_init and provider is not None:
        pose, flag = init_object(object_template, pose, provider, Q, cfg, samples)
        if flag:
            flags.append(flag)
    # stage 1: independent blocks
    if 1 in stages:
        prob = _Problem(bt, ot, template, object_template, pose.R if has_o else None,
                        fit_body=has_h, fit_object=has_o)
        prob.fixed_body, prob.fixed_pose = body, pose
        x, converged[1], iterations[1] = _run_stage(prob, prob.pack(body, pose), cfg.stage_iters[1],
                                                    cfg, 1, history)
        body, _, pose = prob.unpack(x)
    contacts = ContactSet()
    # stage 2: frozen contacts, joint descent
    if 2 in stages and has_h and has_o and provider is not None:
        contacts = detect_contacts(pose, object_template, provider, cfg.eps)
        if len(contacts) and cfg.w_contact > 0:
            prob = _Problem(bt, ot, template, object_template, pose.R, contacts=contacts)
            x, converged[2], iterations[2] = _run_stage(prob, prob.pack(body, pose),
                                                        cfg.stage_iters[2], cfg, 2, history)
            body, _, pose = prob.unpack(x)
    if body is not None:
        body = body.canonical()
    return FitResult(body if has_h else None, pose if has_o else None, contacts, history,
                     converged, iterations, flags)

