"""Palm detection post-processing and evaluation.

Boxes are ``(x1, y1, x2, y2)`` pixel coordinates with the origin at the top
left.  Nothing here runs a network: detections are read from text files and
go through thresholding, class-aware NMS, letterbox rescaling and the
precision/recall/mAP evaluator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import DomainError, ValidationError

CLASSES = ("palm", "tree")
PROB_EPS = 1e-12
MAP_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
GRID_STRIDES = (16, 32, 64)
BOXES_PER_CELL = 3


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = tuple(float(c) for c in (self.x1, self.y1, self.x2, self.y2))
        for name, c in zip(("x1", "y1", "x2", "y2"), coords):
            object.__setattr__(self, name, c)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"non-finite box {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError(f"box {coords} needs x1 < x2 and y1 < y2")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self):
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: str
    confidence: float
    image_id: str = ""
    # probability of ``class_id``; single-score detector heads emit one value, so it
    # defaults to the confidence
    class_prob: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "confidence", float(self.confidence))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")
        if self.class_prob is not None and not 0.0 <= self.class_prob <= 1.0:
            raise ValidationError(f"class_prob {self.class_prob} outside [0, 1]")

    @property
    def cls_prob(self) -> float:
        return self.confidence if self.class_prob is None else self.class_prob


@dataclass(frozen=True)
class GroundTruth:
    box: BoundingBox
    class_id: str
    image_id: str = ""


@dataclass(frozen=True)
class AlignmentParams:
    alpha: float = 0.5
    beta: float = 6.0
    m: int = 10

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValidationError("alpha and beta must be finite")
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("alpha and beta must be non-negative")
        if int(self.m) != self.m or self.m < 1:
            raise ValidationError("m must be a positive integer")


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_x: float
    pad_y: float
    network_size: int
    original_w: float
    original_h: float

    @classmethod
    def fit(cls, original_w, original_h, network_size=1280):
        if original_w <= 0 or original_h <= 0 or network_size <= 0:
            raise DomainError("image and network sizes must be positive")
        scale = min(network_size / original_w, network_size / original_h)
        pad_x = (network_size - original_w * scale) / 2.0
        pad_y = (network_size - original_h * scale) / 2.0
        return cls(scale, pad_x, pad_y, network_size, original_w, original_h)


class DroppedBox(DomainError):
    """Box collapsed to zero area after clamping to the original image."""


def sigmoid(net):
    """Numerically stable logistic function; works on scalars and arrays."""
    net = np.asarray(net, dtype=np.float64)
    out = np.empty_like(net)
    pos = net >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-net[pos]))
    e = np.exp(net[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def alignment_score(s: float, u: float, params: AlignmentParams) -> float:
    """Task-alignment metric ``s**alpha * u**beta`` (with ``0**0 == 1``)."""
    if not (0.0 <= s <= 1.0 and 0.0 <= u <= 1.0):
        raise DomainError("s and u must lie in [0, 1]")
    # Python's float power already gives 0.0**0 == 1.0
    return (s ** params.alpha) * (u ** params.beta)


def assign_anchors(candidates: Sequence, params: AlignmentParams):
    """Split candidate anchors ``[(s, u), ...]`` into positive and negative
    index sets: the ``m`` highest alignment scores win, lower index first on
    ties."""
    if not candidates:
        raise DomainError("no candidates")
    t = [alignment_score(s, u, params) for s, u in candidates]
    order = sorted(range(len(t)), key=lambda i: (-t[i], i))
    positives = set(order[:params.m])
    negatives = set(range(len(t))) - positives
    return positives, negatives


@dataclass(frozen=True)
class LossBreakdown:
    cls_loss: float
    loc_loss: float
    conf_loss: float
    total: float
    empty: bool = False


def _bce(p, y):
    p = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def composite_loss(pairs: Sequence, unmatched_detections: Sequence = (),
                   unmatched_truths: Sequence = (), weights=(1.0, 1.0, 1.0)) -> LossBreakdown:
    """Classification + localization + confidence loss over matched boxes.

    * classification: BCE of each matched detection's class probability
      against 1 (same class as its truth) or 0.
    * localization: mean ``1 - IoU`` over matched pairs; every unmatched truth
      counts as a miss with IoU 0.
    * confidence: BCE of confidence against 1 for matched and 0 for unmatched
      detections.
    """
    w_cls, w_loc, w_conf = weights
    if not pairs and not unmatched_detections and not unmatched_truths:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, empty=True)

    cls_terms = [_bce(d.cls_prob, 1.0 if d.class_id == g.class_id else 0.0) for d, g in pairs]
    loc_terms = [1.0 - iou(d.box, g.box) for d, g in pairs] + [1.0] * len(unmatched_truths)
    conf_terms = [_bce(d.confidence, 1.0) for d, _ in pairs]
    conf_terms += [_bce(d.confidence, 0.0) for d in unmatched_detections]

    cls_loss = math.fsum(cls_terms) / len(cls_terms) if cls_terms else 0.0
    loc_loss = math.fsum(loc_terms) / len(loc_terms) if loc_terms else 0.0
    conf_loss = math.fsum(conf_terms) / len(conf_terms) if conf_terms else 0.0
    total = w_cls * cls_loss + w_loc * loc_loss + w_conf * conf_loss
    return LossBreakdown(cls_loss, loc_loss, conf_loss, total)


def nms(detections: Sequence[Detection], conf_threshold: float = 0.25,
        iou_threshold: float = 0.7) -> list:
    """Confidence threshold followed by greedy class-aware suppression.

    A box is suppressed when its IoU with an already kept box of the same
    class (and image) exceeds ``iou_threshold``.  Output is ordered by
    descending confidence, ties resolved by original position.
    """
    for name, v in (("conf_threshold", conf_threshold), ("iou_threshold", iou_threshold)):
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"{name} must lie in [0, 1]")
    order = sorted((i for i, d in enumerate(detections) if d.confidence >= conf_threshold),
                   key=lambda i: (-detections[i].confidence, i))
    kept = []
    kept_by_group = {}
    for i in order:
        det = detections[i]
        group = kept_by_group.setdefault((det.image_id, det.class_id), [])
        if any(iou(det.box, k.box) > iou_threshold for k in group):
            continue
        group.append(det)
        kept.append(det)
    return kept


def letterbox_to_original(box: BoundingBox, t: LetterboxTransform) -> BoundingBox:
    """Map a box from the square network canvas back to original pixels."""
    x1 = min(max((box.x1 - t.pad_x) / t.scale, 0.0), t.original_w)
    x2 = min(max((box.x2 - t.pad_x) / t.scale, 0.0), t.original_w)
    y1 = min(max((box.y1 - t.pad_y) / t.scale, 0.0), t.original_h)
    y2 = min(max((box.y2 - t.pad_y) / t.scale, 0.0), t.original_h)
    if not (x1 < x2 and y1 < y2):
        raise DroppedBox(f"box {box.as_tuple()} lies outside the original image")
    return BoundingBox(x1, y1, x2, y2)


def original_to_letterbox(box: BoundingBox, t: LetterboxTransform) -> BoundingBox:
    return BoundingBox(box.x1 * t.scale + t.pad_x, box.y1 * t.scale + t.pad_y,
                       box.x2 * t.scale + t.pad_x, box.y2 * t.scale + t.pad_y)


def rescale_detections(detections: Iterable[Detection], t: LetterboxTransform) -> list:
    """Letterbox-to-original for a list, silently dropping collapsed boxes."""
    out = []
    for d in detections:
        try:
            box = letterbox_to_original(d.box, t)
        except DroppedBox:
            continue
        out.append(Detection(box, d.class_id, d.confidence, d.image_id, d.class_prob))
    return out


def grid_scales(network_size: int):
    """Prediction grids ``((w, h), ...)`` of the three detection heads."""
    if int(network_size) != network_size or network_size <= 0 or network_size % 64:
        raise DomainError(f"network size {network_size} is not a positive multiple of 64")
    return tuple((network_size // s, network_size // s) for s in GRID_STRIDES)


def prediction_count(network_size: int) -> int:
    """Raw boxes emitted before NMS: three per cell over all grids."""
    return BOXES_PER_CELL * sum(w * h for w, h in grid_scales(network_size))


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass
class ClassAP:
    class_id: str
    ap: dict
    n_truths: int
    n_detections: int
    degenerate: bool = False

    @property
    def ap50(self):
        return self.ap[0.5]

    @property
    def ap50_95(self):
        return float(np.mean([self.ap[t] for t in MAP_IOU_THRESHOLDS]))


@dataclass
class EvalReport:
    precision: float
    recall: float
    map50: float
    map50_95: float
    per_class: dict = field(default_factory=dict)
    operating_threshold: float = 0.25
    iou_thresholds: tuple = MAP_IOU_THRESHOLDS

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "map50": self.map50,
            "map50_95": self.map50_95,
            "operating_threshold": self.operating_threshold,
            "iou_thresholds": list(self.iou_thresholds),
            "per_class": {
                c: {
                    "ap": {f"{t:.2f}": v for t, v in r.ap.items()},
                    "ap50": r.ap.get(0.5),
                    "n_truths": r.n_truths,
                    "n_detections": r.n_detections,
                    "degenerate": r.degenerate,
                }
                for c, r in sorted(self.per_class.items())
            },
        }


def match_detections(detections: Sequence[Detection], truths: Sequence[GroundTruth],
                     threshold: float):
    """Greedy matching in descending confidence order.

    Returns ``(order, matches)``: the detection indices in ranking order and,
    for each of them, the index of the matched truth or ``None``.  Each
    detection takes the still-unmatched truth of its image with the highest
    IoU at or above ``threshold``.  Detections and truths should share a class.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    by_image = {}
    for j, g in enumerate(truths):
        by_image.setdefault(g.image_id, []).append(j)
    used = set()
    matches = []
    for i in order:
        d = detections[i]
        best, best_iou = None, -1.0
        for j in by_image.get(d.image_id, ()):
            if j in used:
                continue
            v = iou(d.box, truths[j].box)
            if v >= threshold and v > best_iou:
                best, best_iou = j, v
        if best is not None:
            used.add(best)
        matches.append(best)
    return order, matches


def average_precision(tp_flags: Sequence[bool], n_truths: int) -> float:
    """Area under the precision envelope of a ranked TP/FP sequence."""
    if n_truths == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_flags, dtype=bool))
    recall = tp / n_truths
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).tiny)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_detections(detections: Sequence[Detection], truths: Sequence[GroundTruth],
                        iou_thresholds: Sequence[float] = MAP_IOU_THRESHOLDS,
                        operating_threshold: float = 0.25) -> EvalReport:
    """Per-class AP at each IoU threshold plus pooled precision/recall.

    mAP averages over classes that have ground truth.  A class that only
    appears among detections is listed with AP 0 and ``degenerate=True``.
    Precision and recall are measured at IoU 0.5 on detections whose
    confidence reaches ``operating_threshold``.
    """
    thresholds = tuple(round(float(t), 10) for t in iou_thresholds)
    classes = sorted({d.class_id for d in detections} | {g.class_id for g in truths})
    per_class = {}
    tp_total = fp_total = 0
    for c in classes:
        dets = [d for d in detections if d.class_id == c]
        gts = [g for g in truths if g.class_id == c]
        aps = {}
        for t in thresholds:
            _, matches = match_detections(dets, gts, t)
            aps[t] = average_precision([m is not None for m in matches], len(gts))
        per_class[c] = ClassAP(c, aps, len(gts), len(dets), degenerate=not gts)

        op = [d for d in dets if d.confidence >= operating_threshold]
        _, matches = match_detections(op, gts, 0.5)
        hits = sum(m is not None for m in matches)
        tp_total += hits
        fp_total += len(matches) - hits

    scored = [r for r in per_class.values() if r.n_truths > 0]
    n_truths = sum(r.n_truths for r in scored)

    def mean_ap(ts):
        if not scored:
            return 0.0
        return float(np.mean([np.mean([r.ap[t] for t in ts]) for r in scored]))

    map50 = mean_ap([0.5]) if 0.5 in thresholds else float("nan")
    std_ts = [t for t in MAP_IOU_THRESHOLDS if t in thresholds]
    map50_95 = mean_ap(std_ts) if len(std_ts) == len(MAP_IOU_THRESHOLDS) else mean_ap(thresholds)
    precision = tp_total / (tp_total + fp_total) if tp_total + fp_total else 0.0
    recall = tp_total / n_truths if n_truths else 0.0
    return EvalReport(precision, recall, map50, map50_95, per_class, operating_threshold, thresholds)


# --------------------------------------------------------------------------
# text formats
# --------------------------------------------------------------------------

class DetectionFile(NamedTuple):
    space: str
    detections: list
    original_size: Optional[tuple]


def _parse_header(line):
    fields = dict(tok.split("=", 1) for tok in line.split() if "=" in tok)
    space = fields.get("space")
    if space not in ("network", "original"):
        raise ValidationError(f"header must declare space=network|original, got {line!r}")
    size = None
    if "original_w" in fields or "original_h" in fields:
        try:
            size = (float(fields["original_w"]), float(fields["original_h"]))
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"bad original size in header {line!r}") from exc
    return space, size


def _box(vals, lineno):
    try:
        x1, y1, x2, y2 = (float(v) for v in vals)
    except ValueError as exc:
        raise ValidationError(f"line {lineno}: non-numeric coordinate") from exc
    try:
        return BoundingBox(x1, y1, x2, y2)
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from exc


def _content_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def load_detection_file(path) -> DetectionFile:
    """Read ``image_id class confidence x1 y1 x2 y2`` lines.

    The first line may be a header ``space=network|original`` (optionally with
    ``original_w=... original_h=...``); without it boxes are taken as
    original-space pixels.
    """
    space, size = "original", None
    dets = []
    for n, (lineno, line) in enumerate(_content_lines(path)):
        if n == 0 and line.startswith("space="):
            space, size = _parse_header(line)
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValidationError(f"line {lineno}: expected 7 fields, got {len(parts)}")
        image_id, cls, conf = parts[0], parts[1], parts[2]
        try:
            confidence = float(conf)
        except ValueError as exc:
            raise ValidationError(f"line {lineno}: bad confidence {conf!r}") from exc
        if not 0.0 <= confidence <= 1.0:
            raise ValidationError(f"line {lineno}: confidence {confidence} outside [0, 1]")
        dets.append(Detection(_box(parts[3:], lineno), cls, confidence, image_id))
    return DetectionFile(space, dets, size)


def load_detections(path) -> list:
    return load_detection_file(path).detections


def load_truths(path) -> list:
    """Read ``image_id class x1 y1 x2 y2`` lines."""
    out = []
    for lineno, line in _content_lines(path):
        parts = line.split()
        if len(parts) != 6:
            raise ValidationError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        out.append(GroundTruth(_box(parts[2:], lineno), parts[1], parts[0]))
    return out


def write_detections(detections: Iterable[Detection], path, space="original", original_size=None):
    header = f"space={space}"
    if original_size is not None:
        header += f" original_w={original_size[0]!r} original_h={original_size[1]!r}"
    lines = [header]
    for d in detections:
        b = d.box
        lines.append(f"{d.image_id} {d.class_id} {d.confidence!r} {b.x1!r} {b.y1!r} {b.x2!r} {b.y2!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_truths(truths: Iterable[GroundTruth], path):
    with open(path, "w", encoding="utf-8") as fh:
        for g in truths:
            b = g.box
            fh.write(f"{g.image_id} {g.class_id} {b.x1!r} {b.y1!r} {b.x2!r} {b.y2!r}\n")
