"""Evaluation metrics and automatic contact annotation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .geometry import SpatialIndex, TriMesh, chamfer


@dataclass
class ContactLabels:
    """Per-object-vertex contact labels with the closest body point (posed and canonical)."""

    labels: np.ndarray
    body_points: np.ndarray
    canonical: np.ndarray
    distances: np.ndarray

    @property
    def indices(self) -> np.ndarray:
        return np.nonzero(self.labels)[0]


def annotate_contacts(body: TriMesh, obj: TriMesh, threshold: float = 0.02,
                      canonical_vertices: np.ndarray | None = None) -> ContactLabels:
    """Label every object vertex closer than ``threshold`` to the body surface.

    A vertex exactly at the threshold is not a contact, except that ``threshold == 0``
    labels touching vertices (distance 0).
    """
    res = SpatialIndex(body).query(obj.vertices)
    d = res.distances
    labels = d < threshold if threshold > 0 else d <= 0.0
    if canonical_vertices is not None:
        tri = np.asarray(canonical_vertices)[body.faces[res.faces]]
        canon = np.einsum("nk,nkc->nc", res.bary, tri)
    else:
        canon = np.full((obj.n_vertices, 3), np.nan)
    return ContactLabels(labels, res.points, canon, d)


def procrustes(source: np.ndarray, target: np.ndarray):
    """Rotation and translation (no scale) best aligning ``source`` onto ``target``."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    H = (source - mu_s).T @ (target - mu_t)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, mu_t - R @ mu_s


def v2v(fitted: TriMesh, gt: TriMesh, aligned: bool = False) -> float:
    """Mean per-vertex distance; optionally after rigid Procrustes alignment."""
    a = np.asarray(fitted.vertices if isinstance(fitted, TriMesh) else fitted, float)
    b = np.asarray(gt.vertices if isinstance(gt, TriMesh) else gt, float)
    if a.shape != b.shape:
        raise ValueError(f"topology mismatch: {a.shape} vs {b.shape}")
    if aligned:
        R, t = procrustes(a, b)
        a = a @ R.T + t
    return float(np.linalg.norm(a - b, axis=1).mean())


@dataclass
class ContactScores:
    precision: float | None
    recall: float | None
    mean_gap: float | None


def contact_metrics(predicted, gt_labels: np.ndarray, body: TriMesh, obj: TriMesh) -> ContactScores:
    """Set precision/recall over object vertices and the mean fitted gap at GT contacts.

    ``predicted`` is a collection of object-vertex indices (or anything with an
    ``indices`` attribute). Undefined ratios are reported as ``None``.
    """
    idx = np.asarray(getattr(predicted, "indices", predicted), dtype=np.int64).reshape(-1)
    gt = np.asarray(gt_labels, dtype=bool)
    pred = np.zeros(len(gt), dtype=bool)
    pred[idx] = True
    tp = int(np.sum(pred & gt))
    precision = tp / int(pred.sum()) if pred.any() else None
    recall = tp / int(gt.sum()) if gt.any() else None
    gap = None
    if gt.any():
        gap = float(SpatialIndex(body).query(obj.vertices[gt]).distances.mean())
    return ContactScores(precision, recall, gap)


@dataclass
class MetricsReport:
    body_v2v: float
    object_v2v: float
    body_chamfer: float
    object_chamfer: float
    contact_precision: float | None
    contact_recall: float | None
    mean_contact_gap: float | None
    body_v2v_aligned: float | None = None
    object_v2v_aligned: float | None = None
    frame: int | None = None

    def row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


CSV_COLUMNS = ("frame", "body_v2v", "object_v2v", "body_chamfer", "object_chamfer",
               "contact_precision", "contact_recall", "mean_contact_gap",
               "body_v2v_aligned", "object_v2v_aligned")


def evaluate_frame(body_fit: TriMesh, obj_fit: TriMesh, body_gt: TriMesh, obj_gt: TriMesh,
                   gt_contacts: np.ndarray, predicted_contacts=(), frame: int | None = None,
                   n_chamfer: int = 5000, seed: int = 0) -> MetricsReport:
    from .geometry import sample_surface

    scores = contact_metrics(predicted_contacts, gt_contacts, body_fit, obj_fit)
    bc = chamfer(sample_surface(body_fit, n_chamfer, seed), sample_surface(body_gt, n_chamfer, seed))
    oc = chamfer(sample_surface(obj_fit, n_chamfer, seed), sample_surface(obj_gt, n_chamfer, seed))
    return MetricsReport(v2v(body_fit, body_gt), v2v(obj_fit, obj_gt), bc, oc,
                         scores.precision, scores.recall, scores.mean_gap,
                         v2v(body_fit, body_gt, aligned=True), v2v(obj_fit, obj_gt, aligned=True),
                         frame)


def aggregate(reports) -> MetricsReport:
    """Mean of each metric over frames, skipping undefined values, in frame order."""
    reports = list(reports)

    def mean(name):
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        return float(np.mean(vals)) if vals else None

    return MetricsReport(mean("body_v2v"), mean("object_v2v"), mean("body_chamfer"),
                         mean("object_chamfer"), mean("contact_precision"), mean("contact_recall"),
                         mean("mean_contact_gap"), mean("body_v2v_aligned"),
                         mean("object_v2v_aligned"), None)


def write_metrics_csv(path, reports, include_aggregate: bool = True) -> None:
    reports = list(reports)
    rows = reports + ([aggregate(reports)] if include_aggregate and reports else [])
    with open(path, "w") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in rows:
            vals = []
            for c in CSV_COLUMNS:
                v = getattr(r, c)
                if c == "frame":
                    vals.append("all" if v is None else str(v))
                else:
                    vals.append("" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.9g}")
            fh.write(",".join(vals) + "\n")
