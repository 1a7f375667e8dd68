"""Sequence tracking, per-frame evaluation and the scikit-learn style registration estimator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .bodymodel import BodyEvaluation, BodyTemplate
from .errors import HoifitError
from .fields import OracleFieldProvider
from .fitting import FitConfig, FitResult, fit_frame
from .geometry import TriMesh
from .metrics import MetricsReport, aggregate, evaluate_frame

# failures that a tracker records and recovers from; programming errors still propagate
_RECOVERABLE = (HoifitError, FloatingPointError, np.linalg.LinAlgError, ValueError)


def oracle_provider(frame):
    """Provider factory returning exact fields from a frame's ground truth."""
    return OracleFieldProvider(frame.body_mesh, frame.template.vertices, frame.object_mesh)


def fitted_meshes(result: FitResult, template: BodyTemplate, object_template: TriMesh | None):
    """Posed body and object meshes of a fit (``None`` for a missing entity)."""
    body = obj = None
    if result.body_params is not None:
        body = BodyEvaluation(template, result.body_params, grad=False).mesh()
    if result.object_pose is not None and object_template is not None:
        obj = object_template.transformed(result.object_pose.R, result.object_pose.t)
    return body, obj


def evaluate_result(result: FitResult, frame, template: BodyTemplate, object_template: TriMesh,
                    index: int | None = None, seed: int = 0) -> MetricsReport:
    """Metrics of one fit against a frame's ground truth."""
    body, obj = fitted_meshes(result, template, object_template)
    if body is None or obj is None:
        raise ValueError("evaluation needs both a fitted body and a fitted object")
    return evaluate_frame(body, obj, frame.body_mesh, frame.object_mesh, frame.contacts.labels,
                          result.contacts, frame=index, seed=seed)


@dataclass
class TrackResult:
    results: list
    reports: list
    errors: dict = field(default_factory=dict)
    # frame index -> "warm" or "scratch"
    init_modes: list = field(default_factory=list)

    @property
    def aggregate(self) -> MetricsReport | None:
        return aggregate(self.reports) if self.reports else None


def track_sequence(frames, provider_factory, template: BodyTemplate, object_template: TriMesh,
                   config: FitConfig | None = None, warm_start: bool = True,
                   fallback: bool = True, evaluate: bool = True) -> TrackResult:
    """Fit every frame in order.

    With ``warm_start`` frame t starts from frame t-1's result; frame 0, and any
    frame after a failure, starts from scratch. With ``fallback`` a failed warm
    fit is retried from scratch on the same frame before being recorded as failed.
    Failed frames keep ``None`` in ``results`` and the error text in ``errors``.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("track_sequence needs at least one frame")
    cfg = (config or FitConfig()).check()
    results, reports, modes, errors = [], [], [], {}
    prev = None
    for t, frame in enumerate(frames):
        provider = provider_factory(frame)
        init = prev if warm_start else None
        mode = "warm" if init is not None else "scratch"
        try:
            res = fit_frame(frame, provider, template, object_template, init=init, config=cfg)
        except _RECOVERABLE as exc:
            res = None
            errors[t] = f"{type(exc).__name__}: {exc}"
            if init is not None and fallback:
                mode = "scratch"
                try:
                    res = fit_frame(frame, provider, template, object_template, config=cfg)
                    del errors[t]
                except _RECOVERABLE as exc2:
                    errors[t] = f"{type(exc2).__name__}: {exc2}"
        results.append(res)
        modes.append(mode if res is not None else "failed")
        prev = res
        if evaluate and res is not None:
            reports.append(evaluate_result(res, frame, template, object_template, index=t, seed=cfg.seed))
    return TrackResult(results, reports, errors, modes)


class JointRegistration(BaseEstimator):
    """Estimator wrapper: ``fit(frames)`` registers body and object in every frame.

    ``provider`` is ``"oracle"`` or a callable ``frame -> FieldProvider``.
    Fitted attributes: ``results_``, ``reports_``, ``errors_``.
    """

    def __init__(self, config: FitConfig | None = None, provider="oracle", warm_start: bool = True,
                 fallback: bool = True, evaluate: bool = True):
        self.config = config
        self.provider = provider
        self.warm_start = warm_start
        self.fallback = fallback
        self.evaluate = evaluate

    def _factory(self):
        if self.provider == "oracle":
            return oracle_provider
        if callable(self.provider):
            return self.provider
        raise ValueError(f"unknown provider {self.provider!r}")

    def fit(self, X, y=None):
        frames = list(X)
        if not frames:
            raise ValueError("no frames to fit")
        first = frames[0]
        out = track_sequence(frames, self._factory(), first.template, first.object_template,
                             self.config, self.warm_start, self.fallback, self.evaluate)
        self.results_ = out.results
        self.reports_ = out.reports
        self.errors_ = out.errors
        self.init_modes_ = out.init_modes
        return self

    def predict(self, X=None):
        """Fitted ``(BodyParams, RigidPose)`` per frame (``None`` for failed frames)."""
        if not hasattr(self, "results_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("call fit first")
        return [None if r is None else (r.body_params, r.object_pose) for r in self.results_]

    def score(self, X=None, y=None) -> float:
        """Negative aggregate body + object v2v in metres (higher is better)."""
        agg = aggregate(self.reports_)
        return -(agg.body_v2v + agg.object_v2v)
