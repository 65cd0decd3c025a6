"""Clinical-evidence metrics: resection ratio, outcome regression, ACC/F1 and specificity."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def resection_ratio(labels: Sequence[int], channels: Sequence[str], resected) -> float | None:
    """Share of predicted-pathological events lying in resected channels; ``None`` without any."""
    labels = np.asarray(labels, dtype=int)
    in_resected = np.array([c in resected for c in channels], dtype=bool)
    n_path = int(labels.sum())
    if n_path == 0:
        return None
    return int((labels.astype(bool) & in_resected).sum()) / n_path


def specificity(labels: Sequence[int], channels: Sequence[str], resected) -> float | None:
    """Share of preserved-region events predicted non-pathological; ``None`` if none were detected there."""
    labels = np.asarray(labels, dtype=int)
    preserved = np.array([c not in resected for c in channels], dtype=bool)
    n = int(preserved.sum())
    if n == 0:
        return None
    return int((preserved & (labels == 0)).sum()) / n


@dataclass(frozen=True)
class Scores:
    acc: float
    f1: float
    f1_defined: bool = True

    def __iter__(self):
        return iter((self.acc, self.f1))


def accuracy_f1(predicted: Sequence[int], truth: Sequence[int], positive: int = 1) -> Scores:
    """ACC and F1 for the ``positive`` class.

    With neither predicted nor true positives F1 is reported as 0 and
    ``f1_defined`` is False.
    """
    p = np.asarray(predicted) == positive
    t = np.asarray(truth) == positive
    if p.size == 0 or p.size != t.size:
        raise ValueError("predictions and truths must be non-empty and equally long")
    acc = float(np.mean(p == t))
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    denom = 2 * tp + fp + fn
    if denom == 0:
        return Scores(acc, 0.0, False)
    return Scores(acc, 2 * tp / denom, True)


@dataclass(frozen=True)
class OutcomeModel:
    weight: float
    bias: float
    grad_norm: float = 0.0
    n_iter: int = 0

    def predict_proba(self, rr) -> np.ndarray:
        eta = self.weight * np.asarray(rr, dtype=np.float64) + self.bias
        return 1.0 / (1.0 + np.exp(-eta))

    def predict(self, rr) -> np.ndarray:
        return (self.predict_proba(rr) > 0.5).astype(int)


def balanced_weights(y: np.ndarray) -> np.ndarray:
    n = y.size
    n1 = int(y.sum())
    return np.where(y == 1, n / (2.0 * n1), n / (2.0 * (n - n1)))


def impute_rr(rr_values) -> np.ndarray:
    """Missing resection ratios (no pathological prediction) become 1.0."""
    return np.array([1.0 if r is None or (isinstance(r, float) and math.isnan(r)) else float(r)
                     for r in rr_values])


def _objective(theta, x, y, w):
    eta = theta[0] * x + theta[1]
    # log(1 + e^eta) - y * eta, evaluated stably
    return float(np.mean(w * (np.logaddexp(0.0, eta) - y * eta)))


def fit_outcome_model(rr_values, outcomes, sample_weight=None, tol: float = 1e-8,
                      max_iter: int = 100_000) -> OutcomeModel:
    """Single-feature logistic regression with balanced class weights.

    Minimises the weighted mean negative log-likelihood by damped Newton
    iterations until the gradient norm drops below ``tol``.  ``outcomes`` use
    1 for surgical success.  Missing ``rr`` values are imputed as 1.0.
    """
    x = impute_rr(rr_values)
    y = np.asarray(outcomes, dtype=np.float64)
    if x.size != y.size or x.size == 0:
        raise ValueError("rr values and outcomes must be non-empty and equally long")
    if y.min() == y.max():
        raise ValueError("outcome regression needs both outcome classes")
    w = balanced_weights(y) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    X = np.stack([x, np.ones_like(x)], axis=1)
    theta = np.zeros(2)
    grad_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ theta
        p = 1.0 / (1.0 + np.exp(-eta))
        grad = X.T @ (w * (p - y)) / x.size
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < tol:
            break
        hess = (X * (w * p * (1 - p))[:, None]).T @ X / x.size
        try:
            step = np.linalg.solve(hess + 1e-12 * np.eye(2), grad)
        except np.linalg.LinAlgError:
            step = grad
        f0 = _objective(theta, x, y, w)
        t = 1.0
        while t > 1e-12 and _objective(theta - t * step, x, y, w) > f0 - 1e-4 * t * float(grad @ step):
            t *= 0.5
        if t <= 1e-12:
            # Newton direction stalled; fall back to a small gradient step
            t, step = 1.0, grad
            while t > 1e-16 and _objective(theta - t * step, x, y, w) > f0:
                t *= 0.5
        theta = theta - t * step
    return OutcomeModel(float(theta[0]), float(theta[1]), grad_norm, it)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population (N-denominator) standard deviation."""
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        return float("nan"), float("nan")
    return float(a.mean()), float(a.std(ddof=0))


@dataclass
class FoldMetrics:
    fold_id: int
    acc: float
    f1: float
    f1_defined: bool
    weight: float
    bias: float
    spec: float | None
    n_test_subjects: int


@dataclass
class MetricsReport:
    folds: list = field(default_factory=list)
    subjects: list = field(default_factory=list)  # per-subject rows
    acc_mean: float = float("nan")
    acc_std: float = float("nan")
    f1_mean: float = float("nan")
    f1_std: float = float("nan")
    spec: float | None = None
    spec_excluded: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_folds(cls, folds: Sequence[FoldMetrics], subjects: Sequence[dict], **kw) -> "MetricsReport":
        rep = cls(list(folds), list(subjects), **kw)
        rep.acc_mean, rep.acc_std = mean_std([f.acc for f in folds])
        rep.f1_mean, rep.f1_std = mean_std([f.f1 for f in folds])
        specs = [s["specificity"] for s in subjects if s.get("role") == "test" and s.get("specificity") is not None
                 and s.get("outcome") == "seizure_free"]
        rep.spec = float(np.mean(specs)) if specs else None
        rep.spec_excluded = sorted(s["subject"] for s in subjects if s.get("role") == "test"
                                   and s.get("outcome") == "seizure_free" and s.get("specificity") is None)
        if any(not f.f1_defined for f in folds):
            rep.flags.append("f1_undefined_in_some_fold")
        if any(s.get("rr_imputed") for s in subjects):
            rep.flags.append("rr_imputed_for_some_subjects")
        return rep

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            if isinstance(v, (np.floating, np.integer)):
                return clean(v.item())
            return v

        return clean({
            "acc_mean": self.acc_mean, "acc_std": self.acc_std,
            "f1_mean": self.f1_mean, "f1_std": self.f1_std,
            "spec": self.spec, "spec_excluded_subjects": self.spec_excluded,
            "std_convention": "population",
            "folds": [vars(f) for f in self.folds],
            "subjects": self.subjects,
            "flags": self.flags,
            **self.extra,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_markdown(self) -> str:
        def fmt(v):
            return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"

        lines = ["# Evaluation report", "",
                 "| metric | mean | std |", "|---|---|---|",
                 f"| ACC | {fmt(self.acc_mean)} | {fmt(self.acc_std)} |",
                 f"| F1 | {fmt(self.f1_mean)} | {fmt(self.f1_std)} |",
                 f"| SPEC | {fmt(self.spec)} | |", "",
                 "## Folds", "", "| fold | ACC | F1 | SPEC | weight | bias |", "|---|---|---|---|---|---|"]
        for f in self.folds:
            lines.append(f"| {f.fold_id} | {fmt(f.acc)} | {fmt(f.f1)} | {fmt(f.spec)} | {f.weight:.4f} | {f.bias:.4f} |")
        if self.flags:
            lines += ["", "Flags: " + ", ".join(self.flags)]
        return "\n".join(lines) + "\n"
