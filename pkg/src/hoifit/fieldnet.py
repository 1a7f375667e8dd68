"""Trainable field provider: a fixed occupancy pyramid feeding learned decoders.

The encoder is not learned. Segmented clouds are voxelized into a multi-scale
pyramid of occupancy and truncated point-density channels; a query point gathers
trilinearly interpolated features from every level at a small stencil of displaced
positions (giving each decoder spatial context) and appends its normalized
coordinates. Three multilayer perceptrons decode unsigned distances to the human and
object surfaces, the canonical body correspondence and the object orientation axes.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .errors import FlaggedNumericalFault, TrainingDiverged
from .fields import EPS_CONTACT, FieldProvider, FieldSamples, compute_orientation
from .geometry import HUMAN, OBJECT, TriMesh, sample_surface
from .validation import check_points

logger = logging.getLogger(__name__)

N_CHANNELS = 4


# ------------------------------------------------------------------------ encoder


@dataclass
class FeatureGrid:
    """Occupancy/density pyramid; ``levels[s]`` has shape (G / 2^s,) * 3 + (4,)."""

    lo: np.ndarray
    hi: np.ndarray
    levels: list
    n_dropped: int = 0

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def resolution(self, s: int) -> int:
        return self.levels[s].shape[0]

    def cell_size(self, s: int) -> np.ndarray:
        return (self.hi - self.lo) / self.resolution(s)


def working_bounds(points: np.ndarray, size: float = 2.56):
    """Axis-aligned cube of side ``size`` centred on the bounding box of ``points``."""
    p = check_points(points, allow_empty=False)
    c = 0.5 * (p.min(axis=0) + p.max(axis=0))
    return c - size / 2.0, c + size / 2.0


def encode(cloud, bounds, levels: int = 3, resolution: int = 32,
           density_cap: float = 32.0) -> FeatureGrid:
    """Voxelize a labeled cloud into a pyramid of 4-channel grids.

    Channels: human occupancy, object occupancy, human density and object density
    (point count / ``density_cap`` truncated at 1). Level ``s + 1`` is the 2x2x2
    average of level ``s``. Points outside ``bounds`` are dropped and counted; more
    than 1% outside is an error.
    """
    lo, hi = (np.asarray(b, float) for b in bounds)
    if np.any(hi <= lo):
        raise ValueError("empty bounds")
    if resolution % (2 ** (levels - 1)):
        raise ValueError("resolution must be divisible by 2^(levels-1)")
    pts = cloud.points
    labels = cloud.labels
    for lab, name in ((HUMAN, "human"), (OBJECT, "object")):
        if not np.any(labels == lab):
            raise ValueError(f"cloud has no {name} points")
    G = resolution
    idx = np.floor((pts - lo) / (hi - lo) * G).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < G), axis=1)
    n_out = int(len(pts) - inside.sum())
    if n_out > 0.01 * len(pts):
        raise ValueError(f"{n_out} of {len(pts)} points fall outside the bounds")
    if n_out:
        logger.info("encode: dropped %d points outside the bounds", n_out)
    idx = idx[inside]
    lab = labels[inside]
    flat = (idx[:, 0] * G + idx[:, 1]) * G + idx[:, 2]
    grid = np.zeros((G * G * G, N_CHANNELS))
    for c, l in enumerate((HUMAN, OBJECT)):
        counts = np.bincount(flat[lab == l], minlength=G ** 3).astype(float)
        grid[:, c] = counts > 0
        grid[:, 2 + c] = np.minimum(counts / density_cap, 1.0)
    out = [grid.reshape(G, G, G, N_CHANNELS)]
    for _ in range(1, levels):
        g = out[-1]
        r = g.shape[0] // 2
        out.append(g.reshape(r, 2, r, 2, r, 2, N_CHANNELS).mean(axis=(1, 3, 5)))
    return FeatureGrid(lo, hi, out, n_out)


_STENCILS = {
    "point": np.zeros((1, 3)),
    "axes": np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1],
                      [0, 0, -1]], float),
    "cube": np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], float),
}


def stencil_offsets(name: str) -> np.ndarray:
    try:
        return _STENCILS[name]
    except KeyError:
        raise ValueError(f"unknown stencil {name!r}; known: {sorted(_STENCILS)}") from None


def feature_dim(levels: int, stencil: str = "point") -> int:
    return levels * len(stencil_offsets(stencil)) * N_CHANNELS + 3


def _trilinear(values, lo, cell, p, grad=False):
    """Interpolate cell-centred ``values`` (R, R, R, C) at points ``p``.

    Coordinates are clamped to the outermost cell centres. Returns (n, C) values and,
    if requested, their derivative with respect to ``p`` (n, C, 3).
    """
    R = values.shape[0]
    u = (p - lo) / cell - 0.5
    clamped = (u < 0) | (u > R - 1)
    u = np.clip(u, 0.0, R - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), R - 2) if R > 1 else np.zeros_like(u, np.int64)
    f = u - i0
    out = 0.0
    dout = np.zeros((len(p), values.shape[-1], 3)) if grad else None
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                v = values[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                out = out + (wx * wy * wz)[:, None] * v
                if grad:
                    sx = 1.0 if dx else -1.0
                    sy = 1.0 if dy else -1.0
                    sz = 1.0 if dz else -1.0
                    dout[:, :, 0] += (sx * wy * wz)[:, None] * v
                    dout[:, :, 1] += (wx * sy * wz)[:, None] * v
                    dout[:, :, 2] += (wx * wy * sz)[:, None] * v
    if grad:
        dout = dout / cell[None, None, :]
        dout[np.broadcast_to(clamped[:, None, :], dout.shape)] = 0.0
    return out, dout


def query_features(grid: FeatureGrid, points: np.ndarray, stencil: str = "point",
                   grad: bool = False):
    """Per-level trilinear features at ``points`` (and stencil displacements of one
    cell of each level), concatenated, followed by coordinates normalized to [-1, 1].

    Returns ``(features, outside)`` or ``(features, outside, d_features/d_points)``.
    Points outside the bounds are clamped to the boundary and flagged in ``outside``.
    """
    p = check_points(points)
    outside = np.any((p < grid.lo) | (p > grid.hi), axis=1)
    p = np.clip(p, grid.lo, grid.hi)
    offs = stencil_offsets(stencil)
    feats, dfeats = [], []
    for s, values in enumerate(grid.levels):
        cell = grid.cell_size(s)
        for off in offs:
            v, dv = _trilinear(values, grid.lo, cell, p + off * cell, grad)
            feats.append(v)
            if grad:
                dfeats.append(dv)
    ext = grid.hi - grid.lo
    feats.append(2.0 * (p - grid.lo) / ext - 1.0)
    F = np.concatenate(feats, axis=1)
    if not grad:
        return F, outside
    dcoord = np.broadcast_to(np.diag(2.0 / ext), (len(p), 3, 3)).copy()
    dcoord[outside] = 0.0
    dF = np.concatenate(dfeats + [dcoord], axis=1)
    dF[outside] = 0.0
    return F, outside, dF


# ------------------------------------------------------------------------ decoders


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class MLP:
    weights: list
    biases: list

    @property
    def shapes(self):
        return [w.shape for w in self.weights]

    def tensors(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])


HEADS = ("udf", "corr", "orient")
HEAD_DIMS = {"udf": 2, "corr": 3, "orient": 9}


@dataclass
class DecoderParams:
    """Weights of the three decoders; hidden layers use softplus activations."""

    udf: MLP
    corr: MLP
    orient: MLP
    delta: float = 0.2

    @property
    def input_dim(self) -> int:
        return self.udf.weights[0].shape[1]

    def heads(self):
        return [(h, getattr(self, h)) for h in HEADS]

    def tensors(self) -> list:
        return [t for _, m in self.heads() for t in m.tensors()]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def with_vector(self, x: np.ndarray) -> "DecoderParams":
        out = self.copy()
        pos = 0
        for t in out.tensors():
            t[...] = x[pos:pos + t.size].reshape(t.shape)
            pos += t.size
        return out

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.udf.copy(), self.corr.copy(), self.orient.copy(), self.delta)

    def zeros_like(self) -> "DecoderParams":
        return self.with_vector(np.zeros(self.to_vector().size))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())


def init_decoder(input_dim: int, hidden=(128, 128, 128), seed=0, delta: float = 0.2) -> DecoderParams:
    """Glorot-uniform weights, zero biases; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    mlps = []
    for h in HEADS:
        dims = [input_dim, *hidden, HEAD_DIMS[h]]
        W, b = [], []
        for din, dout in zip(dims[:-1], dims[1:]):
            lim = np.sqrt(6.0 / (din + dout))
            W.append(rng.uniform(-lim, lim, (dout, din)))
            b.append(np.zeros(dout))
        mlps.append(MLP(W, b))
    return DecoderParams(*mlps, delta=delta)


def _mlp_forward(mlp: MLP, x):
    acts = [x]
    pre = []
    h = x
    n = len(mlp.weights)
    for k, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ W.T + b
        pre.append(z)
        h = _softplus(z) if k < n - 1 else z
        acts.append(h)
    return h, (acts, pre)


def _mlp_backward(mlp: MLP, cache, g_out, need_input=False):
    acts, pre = cache
    n = len(mlp.weights)
    gW = [None] * n
    gb = [None] * n
    g = g_out
    for k in range(n - 1, -1, -1):
        if k < n - 1:
            g = g * _sigmoid(pre[k])
        gW[k] = g.T @ acts[k]
        gb[k] = g.sum(axis=0)
        if k > 0 or need_input:
            g = g @ mlp.weights[k]
    return gW, gb, (g if need_input else None)


@dataclass
class DecodeOutput:
    samples: FieldSamples
    caches: dict
    raw_udf: np.ndarray


def decode(params: DecoderParams, features: np.ndarray, keep_cache: bool = False):
    """Forward pass of all heads. Returns :class:`FieldSamples` (or a DecodeOutput)."""
    F = np.asarray(features, float)
    if F.ndim == 1:
        F = F[None]
    if F.shape[1] != params.input_dim:
        raise ValueError(f"feature dimension {F.shape[1]} does not match decoder input {params.input_dim}")
    outs, caches = {}, {}
    for h, m in params.heads():
        outs[h], caches[h] = _mlp_forward(m, F)
    z = outs["udf"]
    u = params.delta * _softplus(z)
    samples = FieldSamples(u[:, 0], u[:, 1], outs["corr"], outs["orient"])
    for arr in (u, outs["corr"], outs["orient"]):
        if not np.all(np.isfinite(arr)):
            raise FlaggedNumericalFault("non-finite decoder output")
    if keep_cache:
        return DecodeOutput(samples, caches, z)
    return samples


# ----------------------------------------------------------------------- training


@dataclass
class TrainBatch:
    points: np.ndarray
    u_h: np.ndarray
    u_o: np.ndarray
    c: np.ndarray
    a: np.ndarray
    eps: float = EPS_CONTACT

    @property
    def mask(self) -> np.ndarray:
        return self.u_o < self.eps

    def subset(self, idx) -> "TrainBatch":
        return TrainBatch(self.points[idx], self.u_h[idx], self.u_o[idx], self.c[idx], self.a[idx],
                          self.eps)


def _loss_from_features(params: DecoderParams, F, batch: TrainBatch, lam_c=1.0, lam_a=1.0,
                        need_grad=True):
    out = decode(params, F, keep_cache=True)
    s = out.samples
    n = len(F)
    du_h = s.u_h - batch.u_h
    du_o = s.u_o - batch.u_o
    l_udf = float(np.mean(du_h ** 2 + du_o ** 2))
    dc = s.c - batch.c
    l_corr = float(np.mean(np.sum(dc ** 2, axis=1)))
    mask = batch.mask
    m = int(mask.sum())
    if m and lam_a > 0:
        da = (s.a - batch.a) * mask[:, None]
        l_or = float(np.sum(da ** 2) / m)
    else:
        da = np.zeros_like(s.a)
        l_or = 0.0
    loss = l_udf + lam_c * l_corr + lam_a * l_or
    parts = {"total": loss, "udf": l_udf, "corr": l_corr, "orient": l_or}
    if not need_grad:
        return loss, None, parts
    g_u = np.stack([du_h, du_o], axis=1) * (2.0 / n)
    g_z = g_u * params.delta * _sigmoid(out.raw_udf)
    grads = {}
    grads["udf"] = _mlp_backward(params.udf, out.caches["udf"], g_z)
    grads["corr"] = _mlp_backward(params.corr, out.caches["corr"], dc * (2.0 * lam_c / n))
    grads["orient"] = _mlp_backward(params.orient, out.caches["orient"],
                                    da * (2.0 * lam_a / m) if m and lam_a > 0 else da)
    g = DecoderParams(MLP(*grads["udf"][:2]), MLP(*grads["corr"][:2]), MLP(*grads["orient"][:2]),
                      params.delta)
    return loss, g, parts


def loss_and_gradients(params: DecoderParams, grid: FeatureGrid, batch: TrainBatch,
                       lam_c: float = 1.0, lam_a: float = 1.0, stencil: str = "point"):
    """Training loss and its gradient (a :class:`DecoderParams` of the same shape).

    loss = mean (u_h, u_o) squared error + lam_c * mean squared correspondence error
    + lam_a * orientation squared error averaged over points with target u_o < eps
    (zero when no point qualifies).
    """
    F, _ = query_features(grid, batch.points, stencil)
    loss, g, parts = _loss_from_features(params, F, batch, lam_c, lam_a)
    return loss, g, parts


def sample_training_points(body: TriMesh, obj: TriMesh, bounds, n: int, seed=0,
                           sigmas=(0.01, 0.05)) -> np.ndarray:
    """Half Gaussian-perturbed surface samples from both meshes, half uniform in bounds."""
    rng = np.random.default_rng(seed)
    n_near = n // 2
    n_body = n_near // 2
    sb = sample_surface(body, max(n_body, 1), seed=int(rng.integers(2**31)))[:n_body]
    so = sample_surface(obj, max(n_near - n_body, 1), seed=int(rng.integers(2**31)))[:n_near - n_body]
    near = np.concatenate([sb, so])
    sig = np.asarray(sigmas)[rng.integers(0, len(sigmas), len(near))]
    near = near + rng.normal(0.0, 1.0, near.shape) * sig[:, None]
    lo, hi = bounds
    uni = lo + rng.random((n - n_near, 3)) * (hi - lo)
    return np.clip(np.concatenate([near, uni]), lo, hi)


def make_targets(points, frame, delta: float = 0.2, eps: float = EPS_CONTACT) -> TrainBatch:
    """Oracle targets for query points of a synthetic frame (UDFs clamped at ``delta``)."""
    from .fields import OracleFieldProvider

    orient = compute_orientation(frame.object_mesh.vertices)
    prov = OracleFieldProvider(frame.body_mesh, frame.template.vertices, frame.object_mesh, orient)
    s = prov.query(points)
    return TrainBatch(np.asarray(points, float), np.minimum(s.u_h, delta), np.minimum(s.u_o, delta),
                      s.c, s.a, eps)


@dataclass
class TrainConfig:
    levels: int = 5
    resolution: int = 64
    cube: float = 2.56
    density_cap: float = 32.0
    stencil: str = "cube"
    hidden: tuple = (128, 128, 128)
    delta: float = 0.2
    lam_c: float = 1.0
    lam_a: float = 1.0
    eps: float = EPS_CONTACT
    points_per_scene: int = 4000
    augment: int = 3  # extra copies of each scene under a random rotation about the up axis
    batch_size: int = 512
    steps: int = 24000
    lr: float = 1e-3
    lr_final: float = 1e-4
    seed: int = 0
    log_every: int = 50

    def check(self) -> "TrainConfig":
        if self.augment < 0:
            raise ValueError("augment must be nonnegative")
        if self.steps < 0 or self.batch_size <= 0 or self.points_per_scene <= 0:
            raise ValueError("steps, batch_size and points_per_scene must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        stencil_offsets(self.stencil)
        return self

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        from dataclasses import fields as dfields

        from .io import parse_value

        known = {f.name for f in dfields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in known:
                raise ValueError(f"unknown training option {k!r}")
            v = parse_value(v) if isinstance(v, str) else v
            if k == "hidden":
                v = tuple(int(x) for x in np.atleast_1d(v))
            elif k == "stencil":
                v = str(v)
            elif k in ("levels", "resolution", "points_per_scene", "augment", "batch_size", "steps",
                       "seed", "log_every"):
                v = int(v)
            else:
                v = float(v)
            kw[k] = v
        return cls(**kw).check()


@dataclass
class TrainingData:
    features: np.ndarray
    batch: TrainBatch
    scene: np.ndarray


@dataclass
class _Scene:
    """The fields of a frame that training reads."""

    cloud: object
    body_mesh: TriMesh
    object_mesh: TriMesh
    template: object


def yaw_scene(frame, angle: float) -> _Scene:
    """Rigidly rotate a frame's cloud and meshes about the vertical axis through its centre.

    Canonical correspondences are unchanged; orientation targets follow from the
    rotated object mesh.
    """
    from .geometry import LabeledPointCloud
    from .rotation import rodrigues

    cloud = frame.cloud
    lo, hi = cloud.points.min(axis=0), cloud.points.max(axis=0)
    centre = 0.5 * (lo + hi)
    centre[1] = 0.0
    R = rodrigues(np.array([0.0, angle, 0.0]))
    t = centre - R @ centre
    moved = LabeledPointCloud(cloud.points @ R.T + t, cloud.labels, cloud.cameras)
    return _Scene(moved, frame.body_mesh.transformed(R, t), frame.object_mesh.transformed(R, t),
                  frame.template)


def build_training_data(frames, cfg: TrainConfig) -> TrainingData:
    """Encode each frame's cloud and sample supervised query points (seeded per frame).

    With ``cfg.augment`` each frame also contributes that many copies under seeded
    random rotations about the up axis.
    """
    frames = list(frames)

    def scenes():
        # yawed copies are made one at a time to keep peak memory near the feature array
        yield from frames
        rng = np.random.default_rng([cfg.seed, 2])
        for _ in range(cfg.augment):
            for fr in frames:
                yield yaw_scene(fr, rng.uniform(-np.pi, np.pi))

    n = cfg.points_per_scene
    total = len(frames) * (1 + cfg.augment)
    feats, batches = None, []
    for k, fr in enumerate(scenes()):
        cloud = fr.cloud
        bounds = working_bounds(cloud.points, cfg.cube)
        grid = encode(cloud, bounds, cfg.levels, cfg.resolution, cfg.density_cap)
        pts = sample_training_points(fr.body_mesh, fr.object_mesh, bounds, n, seed=[cfg.seed, k])
        f = query_features(grid, pts, cfg.stencil)[0]
        if feats is None:
            feats = np.empty((total * n, f.shape[1]), np.float32)
        feats[k * n:(k + 1) * n] = f
        batches.append(make_targets(pts, fr, cfg.delta, cfg.eps))
    b = TrainBatch(np.concatenate([x.points for x in batches]), np.concatenate([x.u_h for x in batches]),
                   np.concatenate([x.u_o for x in batches]), np.concatenate([x.c for x in batches]),
                   np.concatenate([x.a for x in batches]), cfg.eps)
    return TrainingData(feats, b, np.repeat(np.arange(total), n))


@dataclass
class TrainResult:
    params: DecoderParams
    curve: list = field(default_factory=list)
    config: TrainConfig = None


def train(frames, config: TrainConfig | None = None, data: TrainingData | None = None,
          init: DecoderParams | None = None) -> TrainResult:
    """Adam on minibatches drawn with a seeded generator; cosine-decayed step size.

    Deterministic for a fixed seed. A non-finite loss aborts with
    :class:`TrainingDiverged` carrying the last finite parameters.
    """
    cfg = (config or TrainConfig()).check()
    frames = list(frames)
    if not frames and data is None:
        raise ValueError("need at least one scene")
    data = data or build_training_data(frames, cfg)
    F = data.features
    n = len(F)
    params = init.copy() if init is not None else init_decoder(F.shape[1], cfg.hidden, cfg.seed, cfg.delta)
    rng = np.random.default_rng([cfg.seed, 1])
    x = params.to_vector()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2, e = 0.9, 0.999, 1e-8
    curve = []
    last_good = params.copy()
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(n, min(cfg.batch_size, n), replace=False)
        loss, g, parts = _loss_from_features(params, F[idx].astype(float), data.batch.subset(idx),
                                             cfg.lam_c, cfg.lam_a)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}", last_good, step)
        last_good = params
        gx = g.to_vector()
        m = b1 * m + (1 - b1) * gx
        v = b2 * v + (1 - b2) * gx * gx
        frac = (step - 1) / max(cfg.steps - 1, 1)
        lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + np.cos(np.pi * frac))
        x = x - lr * (m / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + e)
        params = params.with_vector(x)
        if step == 1 or step % cfg.log_every == 0 or step == cfg.steps:
            curve.append({"step": step, **parts})
    if not params.is_finite():
        raise TrainingDiverged("non-finite parameters after the final step", last_good, cfg.steps)
    return TrainResult(params, curve, cfg)


def dataset_loss(params: DecoderParams, data: TrainingData, cfg: TrainConfig, chunk: int = 8192) -> dict:
    """Loss parts over a whole dataset (mean over chunks weighted by size)."""
    tot = {"total": 0.0, "udf": 0.0, "corr": 0.0, "orient": 0.0}
    n = len(data.features)
    mask = data.batch.mask
    m_all = max(int(mask.sum()), 1)
    for s in range(0, n, chunk):
        idx = np.arange(s, min(s + chunk, n))
        _, _, parts = _loss_from_features(params, data.features[idx].astype(float),
                                          data.batch.subset(idx), cfg.lam_c, cfg.lam_a, need_grad=False)
        w = len(idx) / n
        tot["udf"] += parts["udf"] * w
        tot["corr"] += parts["corr"] * w
        tot["orient"] += parts["orient"] * int(mask[idx].sum()) / m_all
    tot["total"] = tot["udf"] + cfg.lam_c * tot["corr"] + cfg.lam_a * tot["orient"]
    return tot


def write_loss_curve(path, curve) -> None:
    with open(path, "w") as fh:
        fh.write("step,total,udf,corr,orient\n")
        for r in curve:
            fh.write(f"{r['step']},{r['total']:.9g},{r['udf']:.9g},{r['corr']:.9g},{r['orient']:.9g}\n")


# ----------------------------------------------------------------------- provider


class LearnedFieldProvider(FieldProvider):
    """Field provider backed by trained decoders over one frame's encoded cloud."""

    def __init__(self, params: DecoderParams, cloud, config: TrainConfig | None = None):
        self.params = params
        self.config = config or TrainConfig()
        bounds = working_bounds(cloud.points, self.config.cube)
        self.grid = encode(cloud, bounds, self.config.levels, self.config.resolution,
                           self.config.density_cap)

    def query(self, points, grad: bool = False, chunk: int = 16384) -> FieldSamples:
        p = check_points(points)
        parts = []
        for s in range(0, max(len(p), 1), chunk):
            parts.append(self._query(p[s:s + chunk], grad))
        if len(parts) == 1:
            return parts[0]
        cat = lambda name: (None if getattr(parts[0], name) is None
                            else np.concatenate([getattr(x, name) for x in parts]))
        return FieldSamples(*(cat(n) for n in ("u_h", "u_o", "c", "a", "grad_u_h", "grad_u_o")))

    def _query(self, p, grad):
        if not grad:
            F, _ = query_features(self.grid, p, self.config.stencil)
            return decode(self.params, F)
        F, _, dF = query_features(self.grid, p, self.config.stencil, grad=True)
        out = decode(self.params, F, keep_cache=True)
        s = out.samples
        scale = self.params.delta * _sigmoid(out.raw_udf)
        grads = []
        for k in range(2):
            g = np.zeros_like(out.raw_udf)
            g[:, k] = scale[:, k]
            _, _, gF = _mlp_backward(self.params.udf, out.caches["udf"], g, need_input=True)
            grads.append(np.einsum("nd,ndc->nc", gF, dF))
        return FieldSamples(s.u_h, s.u_o, s.c, s.a, grads[0], grads[1])


# --------------------------------------------------------------------- checkpoints

_MAGIC = b"HOIFNET1"
_STENCIL_CODES = {"point": 0, "axes": 1, "cube": 2}


def save_checkpoint(path, params: DecoderParams, cfg: TrainConfig) -> None:
    """Binary container: magic, architecture header, little-endian float64 tensors.

    Header: ``<6q`` (input_dim, n_hidden, levels, resolution, stencil code, reserved),
    ``n_hidden`` ``<q`` widths, ``<3d`` (delta, cube, density_cap); then for each head
    (udf, corr, orient) and layer the weight matrix (out x in, row-major) and bias.
    """
    hidden = [w.shape[0] for w in params.udf.weights[:-1]]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<6q", params.input_dim, len(hidden), cfg.levels, cfg.resolution,
                             _STENCIL_CODES[cfg.stencil], 0))
        fh.write(struct.pack(f"<{len(hidden)}q", *hidden))
        fh.write(struct.pack("<3d", params.delta, cfg.cube, cfg.density_cap))
        for t in params.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(DecoderParams, TrainConfig)`` with the architecture fields restored."""
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a decoder checkpoint")
        din, nh, levels, res, sc, _ = struct.unpack("<6q", fh.read(48))
        hidden = struct.unpack(f"<{nh}q", fh.read(8 * nh)) if nh else ()
        delta, cube, cap = struct.unpack("<3d", fh.read(24))
        params = init_decoder(din, hidden, 0, delta)
        for t in params.tensors():
            t[...] = np.frombuffer(fh.read(8 * t.size), dtype="<f8").reshape(t.shape)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    stencil = {v: k for k, v in _STENCIL_CODES.items()}[sc]
    cfg = TrainConfig(levels=levels, resolution=res, cube=cube, density_cap=cap, stencil=stencil,
                      hidden=tuple(hidden), delta=delta)
    return params, cfg


# ---------------------------------------------------------------------- evaluation


def evaluate_fields(params: DecoderParams, cfg: TrainConfig, frames, n_points: int = 4000,
                    seed=1, band: float = 0.2) -> dict:
    """Held-out field quality.

    ``udf_mae``: mean absolute error of u_h and u_o over query points whose true
    distance lies within ``band``; ``corr_error``: mean correspondence distance over
    points with true u_h within ``band``; ``orient_error_deg``: mean over frames of the
    geodesic angle between the SO(3) projection of the aggregated orientation and the
    ground-truth principal axes.
    """
    from .fields import aggregate_orientation
    from .rotation import geodesic_angle, project_to_so3

    err_u, err_c, err_a = [], [], []
    for k, fr in enumerate(frames):
        prov = LearnedFieldProvider(params, fr.cloud, cfg)
        pts = sample_training_points(fr.body_mesh, fr.object_mesh, (prov.grid.lo, prov.grid.hi),
                                     n_points, seed=[seed, k])
        gt = make_targets(pts, fr, np.inf, cfg.eps)
        pr = prov.query(pts)
        mh = gt.u_h < band
        mo = gt.u_o < band
        err_u.append(np.concatenate([np.abs(pr.u_h - gt.u_h)[mh], np.abs(pr.u_o - gt.u_o)[mo]]))
        err_c.append(np.linalg.norm(pr.c - gt.c, axis=1)[mh])
        try:
            A = project_to_so3(aggregate_orientation(pr, cfg.eps))
            err_a.append(np.degrees(geodesic_angle(A.T, gt.a[0].reshape(3, 3).T)))
        except Exception:
            err_a.append(180.0)
    return {"udf_mae": float(np.mean(np.concatenate(err_u))),
            "corr_error": float(np.mean(np.concatenate(err_c))),
            "orient_error_deg": float(np.mean(err_a)),
            "orient_errors_deg": [float(x) for x in err_a]}


# ---------------------------------------------------------------------- estimator


class FieldNet(BaseEstimator):
    """Estimator wrapper around :func:`train`.

    ``fit(frames)`` trains the decoders on synthetic frames; ``provider(cloud)``
    returns a :class:`LearnedFieldProvider` for a new cloud and ``predict(cloud, points)``
    queries it directly. ``score(frames)`` is the negated held-out UDF error.
    """

    def __init__(self, config: TrainConfig | None = None):
        self.config = config

    def fit(self, X, y=None):
        cfg = (self.config or TrainConfig()).check()
        res = train(list(X), cfg)
        self.params_ = res.params
        self.curve_ = res.curve
        self.config_ = cfg
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("call fit or load first")

    def provider(self, cloud) -> LearnedFieldProvider:
        self._check_fitted()
        return LearnedFieldProvider(self.params_, cloud, self.config_)

    def predict(self, cloud, points) -> FieldSamples:
        return self.provider(cloud).query(points)

    def score(self, X, y=None) -> float:
        self._check_fitted()
        return -evaluate_fields(self.params_, self.config_, list(X))["udf_mae"]

    def save(self, path) -> None:
        self._check_fitted()
        save_checkpoint(path, self.params_, self.config_)

    @classmethod
    def load(cls, path) -> "FieldNet":
        params, cfg = load_checkpoint(path)
        est = cls(cfg)
        est.params_, est.config_, est.curve_ = params, cfg, []
        return est
