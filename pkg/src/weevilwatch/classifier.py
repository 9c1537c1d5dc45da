"""Infestation classifier over pooled CQCC features.

The deep image model is replaced by two small baselines (nearest centroid
and logistic regression) plus an import path for externally produced
per-record scores; all three go through the same metrics code.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .detection import sigmoid
from .errors import DegenerateDataError, DomainError, FormatError, ValidationError
from .ingest import DatasetManifest

POSITIVE = "infested"
NEGATIVE = "not_infested"
BCE_EPS = 1e-12
MODEL_FORMAT = "weevilwatch-classifier"
MODEL_VERSION = 1
_STD_FLOOR = 1e-9


def pool_features(features: np.ndarray) -> np.ndarray:
    """Per-coefficient mean followed by per-coefficient population std."""
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] == 0:
        raise DomainError("need at least one frame to pool")
    return np.concatenate([F.mean(axis=0), F.std(axis=0)])


def label_to_int(label) -> int:
    if label in (1, True, POSITIVE):
        return 1
    if label in (0, False, NEGATIVE):
        return 0
    raise ValidationError(f"not a binary label: {label!r}")


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    stratify: bool = True

    def __post_init__(self):
        r = tuple(float(v) for v in self.ratios)
        if len(r) != 3 or any(v < 0 for v in r) or abs(sum(r) - 1.0) > 1e-12:
            raise ValidationError(f"split ratios must be 3 non-negative values summing to 1, got {r}")
        object.__setattr__(self, "ratios", r)


def _apportion(total: int, weights: Sequence[int]) -> list:
    """Largest-remainder split of ``total`` proportional to ``weights``."""
    wsum = sum(weights)
    if wsum == 0 or total == 0:
        return [0] * len(weights)
    exact = [total * w / wsum for w in weights]
    out = [math.floor(e) for e in exact]
    order = sorted(range(len(weights)), key=lambda i: (-(exact[i] - out[i]), i))
    for i in order[: total - sum(out)]:
        out[i] += 1
    return out


def split_dataset(manifest: DatasetManifest, spec: SplitSpec = SplitSpec()):
    """Deterministic train/val/test partition of a labelled manifest.

    Validation and test sizes are ``floor(n * ratio)`` over the whole set and
    the remainder goes to training.  With ``stratify`` the val/test quotas
    are shared out across labels in proportion to their counts.
    """
    records = list(manifest.records)
    if any(r.label == "unlabeled" for r in records):
        raise ValidationError("cannot split unlabeled records")
    n = len(records)
    n_val = math.floor(n * spec.ratios[1] + 1e-9)
    n_test = math.floor(n * spec.ratios[2] + 1e-9)
    rng = np.random.default_rng(spec.seed)

    if spec.stratify:
        labels = sorted({r.label for r in records})
        groups = [[i for i, r in enumerate(records) if r.label == lab] for lab in labels]
    else:
        groups = [list(range(n))]
    sizes = [len(g) for g in groups]
    val_q = _apportion(n_val, sizes)
    test_q = _apportion(n_test, [s - v for s, v in zip(sizes, val_q)])

    parts = ([], [], [])
    for g, nv, nt in zip(groups, val_q, test_q):
        perm = [g[i] for i in rng.permutation(len(g))]
        parts[1].extend(perm[:nv])
        parts[2].extend(perm[nv:nv + nt])
        parts[0].extend(perm[nv + nt:])
    return tuple(DatasetManifest([records[i] for i in sorted(p)]) for p in parts)


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------

@dataclass
class TrainParams:
    batch_size: int = 16
    learning_rate: float = 1e-4
    epochs: int = 200
    optimizer: str = "adam"
    seed: int = 0


@dataclass
class ClassifierModel:
    kind: str
    dim: int
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    weights: Optional[np.ndarray] = None
    bias: float = 0.0
    centroids: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def standardize(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.dim:
            raise DomainError(f"feature length {X.shape[-1]} does not match model dimension {self.dim}")
        return (X - self.feature_mean) / self.feature_scale

    def to_dict(self) -> dict:
        d = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": self.kind,
            "dim": self.dim,
            "feature_mean": self.feature_mean.tolist(),
            "feature_scale": self.feature_scale.tolist(),
        }
        if self.kind == "logistic":
            d["weights"] = self.weights.tolist()
            d["bias"] = self.bias
        else:
            d["centroids"] = {k: v.tolist() for k, v in sorted(self.centroids.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierModel":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise FormatError("not a weevilwatch classifier model (v1)")
        model = cls(
            kind=d["kind"],
            dim=int(d["dim"]),
            feature_mean=np.asarray(d["feature_mean"], dtype=np.float64),
            feature_scale=np.asarray(d["feature_scale"], dtype=np.float64),
        )
        if model.kind == "logistic":
            model.weights = np.asarray(d["weights"], dtype=np.float64)
            model.bias = float(d["bias"])
        elif model.kind == "nearest_centroid":
            model.centroids = {k: np.asarray(v, dtype=np.float64) for k, v in d["centroids"].items()}
        else:
            raise FormatError(f"unknown model kind {model.kind!r}")
        for arr in [model.feature_mean, model.feature_scale, model.weights, *model.centroids.values()]:
            if arr is not None and arr.shape != (model.dim,):
                raise FormatError("parameter length does not match model dimension")
        return model


def save_model(model: ClassifierModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, indent=1)
        fh.write("\n")


def load_model(path) -> ClassifierModel:
    with open(path, encoding="utf-8") as fh:
        return ClassifierModel.from_dict(json.load(fh))


def bce_loss(score, label) -> float:
    p = min(max(float(score), BCE_EPS), 1.0 - BCE_EPS)
    y = float(label)
    return -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))


def logistic_loss_and_grad(w, b, X, y):
    """Mean binary cross-entropy of ``sigmoid(X @ w + b)`` and its gradient."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = X @ w + b
    # ln(1 + e^z) - y z, stable for large |z|
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    r = sigmoid(z) - y
    return loss, X.T @ r / len(y), float(np.mean(r))


def train(kind: str, X, y, params: TrainParams = TrainParams()) -> ClassifierModel:
    """Fit a baseline on pooled feature vectors ``X`` with labels ``y``.

    ``y`` may hold ``0/1`` or the strings ``infested``/``not_infested``.
    Features are standardised with training-set statistics first.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.array([label_to_int(v) for v in y], dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise DomainError("X must be 2-D with one row per label")
    if len(set(y.tolist())) < 2:
        raise DegenerateDataError("training set needs both classes")

    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > _STD_FLOOR * (1.0 + np.abs(mean)), scale, 1.0)
    model = ClassifierModel(kind, X.shape[1], mean, scale)
    Z = model.standardize(X)

    if kind == "nearest_centroid":
        model.centroids = {POSITIVE: Z[y == 1].mean(axis=0), NEGATIVE: Z[y == 0].mean(axis=0)}
        return model
    if kind != "logistic":
        raise DomainError(f"unknown classifier kind {kind!r}")
    if params.optimizer not in ("adam", "sgd"):
        raise DomainError(f"unknown optimizer {params.optimizer!r}")

    rng = np.random.default_rng(params.seed)
    w = np.zeros(Z.shape[1])
    b = 0.0
    m_w, v_w = np.zeros_like(w), np.zeros_like(w)
    m_b = v_b = 0.0
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    for _ in range(params.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), params.batch_size):
            idx = order[start:start + params.batch_size]
            _, gw, gb = logistic_loss_and_grad(w, b, Z[idx], y[idx])
            step += 1
            if params.optimizer == "sgd":
                w -= params.learning_rate * gw
                b -= params.learning_rate * gb
                continue
            m_w = beta1 * m_w + (1 - beta1) * gw
            v_w = beta2 * v_w + (1 - beta2) * gw * gw
            m_b = beta1 * m_b + (1 - beta1) * gb
            v_b = beta2 * v_b + (1 - beta2) * gb * gb
            c1, c2 = 1 - beta1 ** step, 1 - beta2 ** step
            w -= params.learning_rate * (m_w / c1) / (np.sqrt(v_w / c2) + eps)
            b -= params.learning_rate * (m_b / c1) / (math.sqrt(v_b / c2) + eps)
        history.append(logistic_loss_and_grad(w, b, Z, y)[0])
    model.weights, model.bias, model.history = w, b, history
    return model


def decision_value(model: ClassifierModel, features) -> np.ndarray:
    """Pre-sigmoid score: logistic net, or centroid distance margin."""
    Z = model.standardize(features)
    if model.kind == "logistic":
        return Z @ model.weights + model.bias
    d_pos = np.linalg.norm(Z - model.centroids[POSITIVE], axis=-1)
    d_neg = np.linalg.norm(Z - model.centroids[NEGATIVE], axis=-1)
    return d_neg - d_pos


def classify(model: ClassifierModel, features):
    """``(label, score)`` for one vector; label is infested iff score >= 0.5."""
    score = float(sigmoid(decision_value(model, features)))
    return (POSITIVE if score >= 0.5 else NEGATIVE), score


def classify_many(model: ClassifierModel, X):
    scores = np.atleast_1d(sigmoid(decision_value(model, np.atleast_2d(X))))
    labels = [POSITIVE if s >= 0.5 else NEGATIVE for s in scores]
    return labels, scores


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassificationMetrics:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    precision_degenerate: bool = False
    recall_degenerate: bool = False

    @classmethod
    def from_counts(cls, tp, fp, tn, fn) -> "ClassificationMetrics":
        total = tp + fp + tn + fn
        if total == 0:
            raise DomainError("empty test set")
        p_deg = tp + fp == 0
        r_deg = tp + fn == 0
        precision = 0.0 if p_deg else tp / (tp + fp)
        recall = 0.0 if r_deg else tp / (tp + fn)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(tp, fp, tn, fn, (tp + tn) / total, precision, recall, f1, p_deg, r_deg)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "degenerate": {"precision": self.precision_degenerate, "recall": self.recall_degenerate},
        }


def metrics_from_predictions(y_true, y_pred) -> ClassificationMetrics:
    t = np.array([label_to_int(v) for v in y_true], dtype=bool)
    p = np.array([label_to_int(v) for v in y_pred], dtype=bool)
    if t.size != p.size:
        raise DomainError("prediction and truth lengths differ")
    return ClassificationMetrics.from_counts(
        int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(~t & ~p)), int(np.sum(t & ~p))
    )


def evaluate(model: ClassifierModel, X, y) -> ClassificationMetrics:
    if len(y) == 0:
        raise DomainError("empty test set")
    labels, _ = classify_many(model, X)
    return metrics_from_predictions(y, labels)


def evaluate_scores(scores: dict, truth: dict, threshold: float = 0.5) -> ClassificationMetrics:
    """Metrics for externally produced scores keyed by record id."""
    missing = sorted(set(truth) - set(scores))
    if missing:
        raise ValidationError(f"no score for records {missing[:5]}")
    ids = sorted(truth)
    return metrics_from_predictions([truth[i] for i in ids], [scores[i] >= threshold for i in ids])


def load_scores(path) -> dict:
    """Read an external ``record_id,score`` CSV."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return out
        if not {"record_id", "score"} <= set(reader.fieldnames):
            raise FormatError("score file header must be 'record_id,score'")
        for lineno, row in enumerate(reader, start=2):
            try:
                s = float(row["score"])
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"line {lineno}: bad score") from exc
            if not 0.0 <= s <= 1.0:
                raise ValidationError(f"line {lineno}: score {s} outside [0, 1]")
            if row["record_id"] in out:
                raise ValidationError(f"line {lineno}: duplicate record_id {row['record_id']!r}")
            out[row["record_id"]] = s
    return out


def write_metrics(metrics: ClassificationMetrics, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
