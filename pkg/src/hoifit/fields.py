"""Field providers (unsigned distances, body correspondences, object orientation).

A provider answers, for batched 3D query points, the unsigned distance to the human
and object surfaces, the canonical body correspondence and the object's stacked
principal axes. :class:`OracleFieldProvider` computes all of them exactly from
ground-truth meshes; :mod:`hoifit.fieldnet` provides a learned one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AmbiguousOrientation, NoNearSurfacePoints
from .geometry import SpatialIndex, TriMesh
from .rotation import project_to_so3
from .validation import check_points

EPS_CONTACT = 0.02
_SKEW_TOL = 1e-3


@dataclass
class FieldSamples:
    """Batched field values. ``a`` is (n, 9): three stacked unit axes per point."""

    u_h: np.ndarray
    u_o: np.ndarray
    c: np.ndarray
    a: np.ndarray
    grad_u_h: np.ndarray | None = None
    grad_u_o: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.u_h)

    def subset(self, mask) -> "FieldSamples":
        g_h = None if self.grad_u_h is None else self.grad_u_h[mask]
        g_o = None if self.grad_u_o is None else self.grad_u_o[mask]
        return FieldSamples(self.u_h[mask], self.u_o[mask], self.c[mask], self.a[mask], g_h, g_o)


class FieldProvider:
    """Contract: ``query(points, grad=False) -> FieldSamples``; deterministic and pure."""

    def query(self, points: np.ndarray, grad: bool = False) -> FieldSamples:
        raise NotImplementedError


def _unit_grad(p, q, d):
    g = p - q
    safe = np.where(d > 0, d, 1.0)
    return np.where((d > 0)[:, None], g / safe[:, None], 0.0)


class OracleFieldProvider(FieldProvider):
    """Exact fields from a posed ground-truth body and object.

    ``canonical_vertices`` are the body template's rest vertices, so that the
    correspondence of a query is the canonical preimage of its closest posed body
    point. Either mesh may be ``None`` for single-entity frames (distances are then
    reported as +inf).
    """

    def __init__(self, body: TriMesh | None, canonical_vertices: np.ndarray | None,
                 obj: TriMesh | None, orientation: np.ndarray | None = None):
        self.body = body
        self.obj = obj
        self.canonical_vertices = (None if canonical_vertices is None
                                   else np.asarray(canonical_vertices, float))
        self._body_index = SpatialIndex(body) if body is not None else None
        self._obj_index = SpatialIndex(obj) if obj is not None else None
        if orientation is None and obj is not None:
            try:
                orientation = compute_orientation(obj.vertices)
            except AmbiguousOrientation:
                orientation = None
        self.orientation = orientation

    def query(self, points, grad: bool = False) -> FieldSamples:
        p = check_points(points)
        n = len(p)
        u_h = np.full(n, np.inf)
        u_o = np.full(n, np.inf)
        c = np.zeros((n, 3))
        g_h = np.zeros((n, 3)) if grad else None
        g_o = np.zeros((n, 3)) if grad else None
        if self._body_index is not None:
            res = self._body_index.query(p)
            u_h = res.distances
            tri = self.canonical_vertices[self.body.faces[res.faces]]
            c = np.einsum("nk,nkc->nc", res.bary, tri)
            if grad:
                g_h = _unit_grad(p, res.points, u_h)
        if self._obj_index is not None:
            res = self._obj_index.query(p)
            u_o = res.distances
            if grad:
                g_o = _unit_grad(p, res.points, u_o)
        if self.orientation is None:
            a = np.zeros((n, 9))
        else:
            a = np.broadcast_to(np.asarray(self.orientation).reshape(9), (n, 9)).copy()
        return FieldSamples(u_h, u_o, c, a, g_h, g_o)


def oracle_fields(points, gt_body: TriMesh, canonical_vertices, gt_object: TriMesh) -> FieldSamples:
    return OracleFieldProvider(gt_body, canonical_vertices, gt_object).query(points)


def canonicalize_axes(axes: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Fix the sign of each principal axis (rows of ``axes``).

    An axis along which the vertex distribution is skewed points toward the positive
    third central moment, which is intrinsic to the shape and therefore rotation
    equivariant. Axes without significant skew fall back to making their
    largest-magnitude component positive. A left-handed result is repaired by flipping
    the least-skewed axis (the last such axis on ties).
    """
    axes = np.array(axes, dtype=float)
    x = np.asarray(vertices, float) - np.mean(vertices, axis=0)
    proj = x @ axes.T
    sigma = np.sqrt(np.maximum(np.mean(proj**2, axis=0), 1e-300))
    skew = np.mean(proj**3, axis=0) / sigma**3
    conf = np.where(np.abs(skew) > _SKEW_TOL, np.abs(skew), 0.0)
    for k in range(3):
        if conf[k] > 0:
            s = np.sign(skew[k])
        else:
            s = np.sign(axes[k, np.argmax(np.abs(axes[k]))])
        axes[k] *= s if s != 0 else 1.0
    if np.linalg.det(axes) < 0:
        k = int(np.flatnonzero(conf == conf.min())[-1])
        axes[k] *= -1.0
    return axes


def compute_orientation(vertices: np.ndarray, ratio: float = 1.05) -> np.ndarray:
    """Principal axes (rows, descending variance) with canonical signs; det = +1."""
    v = check_points(vertices)
    if len(v) < 4:
        raise ValueError("need at least 4 vertices")
    x = v - v.mean(axis=0)
    cov = x.T @ x / len(v)
    evals, evecs = np.linalg.eigh(cov)
    evals = evals[::-1]
    evecs = evecs[:, ::-1]
    if evals[2] <= 1e-12 * max(evals[0], 1e-300):
        raise ValueError("vertices are coplanar")
    if evals[0] < ratio * evals[1] or evals[1] < ratio * evals[2]:
        raise AmbiguousOrientation(
            f"principal variances {evals} are not separated by a factor {ratio}")
    return canonicalize_axes(evecs.T, v)


def relative_rotation(a_pred: np.ndarray, a_curr: np.ndarray) -> np.ndarray:
    """Least-squares map taking current axes onto predicted axes, projected to SO(3)."""
    P = np.asarray(a_pred, float).reshape(3, 3).T
    C = np.asarray(a_curr, float).reshape(3, 3).T
    if not np.all(np.isfinite(P)) or not np.all(np.isfinite(C)):
        raise ValueError("orientation matrices must be finite")
    s = np.linalg.svd(C, compute_uv=False)
    if s[-1] <= 1e-12 * max(s[0], 1e-300):
        raise ValueError("current orientation is singular")
    R = np.linalg.solve(C.T, P.T).T
    return project_to_so3(R)


def aggregate_orientation(samples: FieldSamples, eps: float = EPS_CONTACT) -> np.ndarray:
    """Mean of per-point orientation predictions over points with ``u_o < eps``."""
    mask = np.asarray(samples.u_o) < eps
    if not np.any(mask):
        raise NoNearSurfacePoints(f"no query point within {eps} m of the object surface")
    return np.asarray(samples.a)[mask].mean(axis=0).reshape(3, 3)


def write_field_dump(fh, points: np.ndarray, samples: FieldSamples) -> None:
    """ASCII table: x y z u_h u_o cx cy cz a1..a9, one row per query point."""
    fh.write("# x y z u_h u_o cx cy cz a1 a2 a3 a4 a5 a6 a7 a8 a9\n")
    table = np.column_stack([points, samples.u_h, samples.u_o, samples.c, samples.a])
    for row in table:
        fh.write(" ".join(f"{x:.9g}" for x in row) + "\n")


def read_field_dump(fh):
    rows = np.loadtxt(fh, ndmin=2)
    return rows[:, :3], FieldSamples(rows[:, 3], rows[:, 4], rows[:, 5:8], rows[:, 8:17])
