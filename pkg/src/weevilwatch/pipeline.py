"""Config-driven batch runs: audio -> CQCC -> classifier, detections ->
NMS/rescale/evaluation, then sensor matching and map output, recorded in a
run manifest with content digests of every artifact."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .classifier import (
    ClassifierModel,
    SplitSpec,
    TrainParams,
    classify_many,
    evaluate,
    load_model,
    load_scores,
    pool_features,
    save_model,
    split_dataset,
    train,
)
from .cqcc import CqccConfig, cqcc_features
from .detection import (
    MAP_IOU_THRESHOLDS,
    AlignmentParams,
    LetterboxTransform,
    composite_loss,
    evaluate_detections,
    load_detection_file,
    load_truths,
    match_detections,
    nms,
    rescale_detections,
    write_detections,
)
from .errors import ConfigError, StageError, WeevilError
from .geo import generate_map, match_sensors, read_world_file, to_geojson, write_svg
from .ingest import AudioClip, DatasetManifest, load_manifest, load_registry, read_records, read_wav

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
MANIFEST_NAME = "run_manifest.json"
STAGES = ("ingest", "features", "train", "classify", "detections", "map")

DEFAULTS = {
    "version": CONFIG_VERSION,
    "paths": {
        "registry": None,
        "manifest": None,
        "records": None,
        "model": None,
        "scores": None,
        "statuses": None,
        "detections": None,
        "truths": None,
        "world_file": None,
        "output_dir": "out",
    },
    "cqcc": CqccConfig().to_dict(),
    "classifier": {
        "kind": "logistic",
        "batch_size": 16,
        "learning_rate": 1e-4,
        "epochs": 200,
        "optimizer": "adam",
        "seed": 0,
        "split": [0.8, 0.1, 0.1],
        "stratify": True,
        "threshold": 0.5,
    },
    "detection": {
        "conf_threshold": 0.25,
        "iou_threshold": 0.7,
        "network_size": 1280,
        "image_size": None,
        "image_id": None,
        "operating_threshold": 0.25,
        "map_iou_thresholds": list(MAP_IOU_THRESHOLDS),
        "loss_weights": [1.0, 1.0, 1.0],
        "alignment": {"alpha": 0.5, "beta": 6.0, "m": 10},
    },
    "fusion": {"radius_m": 5.0, "classes": ["palm"]},
    "ingest": {"host": "127.0.0.1", "port": 9750, "output": "ingest/records.jsonl"},
}

_INPUT_PATHS = ("registry", "manifest", "records", "model", "scores", "statuses",
                "detections", "truths", "world_file")


@dataclass
class PipelineConfig:
    raw: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.raw[key]

    def path(self, key) -> Optional[Path]:
        value = self.raw["paths"].get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        return self.path("output_dir")

    @property
    def cqcc(self) -> CqccConfig:
        return CqccConfig(**self.raw["cqcc"])

    @property
    def train_params(self) -> TrainParams:
        c = self.raw["classifier"]
        return TrainParams(c["batch_size"], c["learning_rate"], c["epochs"], c["optimizer"], c["seed"])

    @property
    def split(self) -> SplitSpec:
        c = self.raw["classifier"]
        return SplitSpec(tuple(c["split"]), c["seed"], c["stratify"])

    @property
    def alignment(self) -> AlignmentParams:
        return AlignmentParams(**self.raw["detection"]["alignment"])

    def snapshot(self) -> dict:
        return copy.deepcopy(self.raw)


def _merge(base: dict, update: dict, prefix: str, problems: list) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        name = f"{prefix}{key}"
        if key not in base:
            problems.append(f"{name}: unknown key")
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                problems.append(f"{name}: expected a mapping")
            else:
                out[key] = _merge(base[key], value, name + ".", problems)
        else:
            out[key] = value
    return out


def apply_override(raw: dict, override: str) -> None:
    """Set ``a.b.c=value`` in a nested dict; the value is parsed as YAML."""
    if "=" not in override:
        raise ConfigError([f"override {override!r} is not key=value"])
    key, value = override.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError([f"override {key!r}: {p} is not a section"])
    node[parts[-1]] = yaml.safe_load(value)


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_unit(raw, section, key, problems):
    v = raw[section][key]
    if not _is_number(v) or not 0.0 <= v <= 1.0:
        problems.append(f"{section}.{key}: {v!r} must be a number in [0, 1]")


def validate_config(path=None, overrides=(), data: Optional[dict] = None) -> PipelineConfig:
    """Load, default-fill and validate a config; every violation is reported
    together in one :class:`ConfigError`."""
    problems = []
    user = {}
    base_dir = Path.cwd()
    if data is not None:
        user = copy.deepcopy(data)
    elif path is not None:
        path = Path(path)
        base_dir = path.resolve().parent
        try:
            with open(path, encoding="utf-8") as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError([f"cannot read config: {exc}"]) from exc
        except yaml.YAMLError as exc:
            raise ConfigError([f"config does not parse: {exc}"]) from exc
    if not isinstance(user, dict):
        raise ConfigError(["config must be a mapping"])
    for ov in overrides:
        apply_override(user, ov)

    version = user.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        problems.append(f"version: unsupported config version {version!r}")
    raw = _merge(DEFAULTS, user, "", problems)
    cfg = PipelineConfig(raw, base_dir)

    for key in _INPUT_PATHS:
        p = cfg.path(key)
        if p is not None and not p.exists():
            problems.append(f"paths.{key}: {p} does not exist")
    if raw["paths"]["output_dir"] is None:
        problems.append("paths.output_dir: required")

    try:
        CqccConfig(**raw["cqcc"])
    except (TypeError, WeevilError) as exc:
        problems.append(f"cqcc: {exc}")

    c = raw["classifier"]
    if c["kind"] not in ("logistic", "nearest_centroid"):
        problems.append(f"classifier.kind: {c['kind']!r} is not logistic or nearest_centroid")
    if c["optimizer"] not in ("adam", "sgd"):
        problems.append(f"classifier.optimizer: {c['optimizer']!r} is not adam or sgd")
    for key in ("batch_size", "epochs"):
        if not isinstance(c[key], int) or isinstance(c[key], bool) or c[key] < 1:
            problems.append(f"classifier.{key}: must be a positive integer")
    if not _is_number(c["learning_rate"]) or not c["learning_rate"] > 0:
        problems.append("classifier.learning_rate: must be positive")
    if not isinstance(c["seed"], int):
        problems.append("classifier.seed: must be an integer")
    _check_unit(raw, "classifier", "threshold", problems)
    try:
        SplitSpec(tuple(c["split"]), 0)
    except (TypeError, ValueError) as exc:
        problems.append(f"classifier.split: {exc}")

    d = raw["detection"]
    for key in ("conf_threshold", "iou_threshold", "operating_threshold"):
        _check_unit(raw, "detection", key, problems)
    ns = d["network_size"]
    if not isinstance(ns, int) or ns <= 0 or ns % 64:
        problems.append(f"detection.network_size: {ns!r} must be a positive multiple of 64")
    if d["image_size"] is not None and (
        not isinstance(d["image_size"], (list, tuple)) or len(d["image_size"]) != 2
        or not all(_is_number(v) and v > 0 for v in d["image_size"])
    ):
        problems.append("detection.image_size: must be [width, height]")
    ts = d["map_iou_thresholds"]
    if not isinstance(ts, (list, tuple)) or not ts or not all(_is_number(t) and 0 <= t <= 1 for t in ts):
        problems.append("detection.map_iou_thresholds: must be a non-empty list in [0, 1]")
    try:
        AlignmentParams(**d["alignment"])
    except (TypeError, WeevilError) as exc:
        problems.append(f"detection.alignment: {exc}")

    r = raw["fusion"]["radius_m"]
    if not _is_number(r) or not r > 0:
        problems.append(f"fusion.radius_m: {r!r} must be positive")

    if problems:
        raise ConfigError(problems)
    return cfg


# --------------------------------------------------------------------------
# run manifest
# --------------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class StageResult:
    name: str
    status: str = "not_run"
    seconds: float = 0.0
    message: str = ""


@dataclass
class RunManifest:
    config: dict
    stages: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    version: str = __version__
    created_at: str = ""

    @property
    def ok(self) -> bool:
        return not any(s.status == "failed" for s in self.stages)

    def stage(self, name) -> StageResult:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "toolkit": {"name": "weevilwatch", "version": self.version},
            "created_at": self.created_at,
            "config": self.config,
            "stages": [vars(s) for s in self.stages],
            "artifacts": dict(sorted(self.artifacts.items())),
            "metrics": self.metrics,
        }

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST_NAME
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True, default=str)
            fh.write("\n")
        return path


def _jsonable(value):
    return json.loads(json.dumps(value, default=str))


class _Run:
    """Mutable state threaded through the stages of one invocation."""

    def __init__(self, cfg: PipelineConfig, manifest: RunManifest):
        self.cfg = cfg
        self.out = cfg.output_dir
        self.manifest = manifest
        self.registry = None
        self.corpus = None
        self.records = []
        self.corpus_features = {}
        self.record_features = {}
        self.model: Optional[ClassifierModel] = None
        self.scores = None
        self.statuses = None
        self.detections = None
        self.image_size = None
        self.image_id = None

    def artifact(self, relpath) -> Path:
        p = self.out / relpath
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record_artifact(self, relpath):
        self.manifest.artifacts[str(relpath)] = file_digest(self.out / relpath)

    def write_json(self, relpath, obj):
        with open(self.artifact(relpath), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True)
            fh.write("\n")
        self.record_artifact(relpath)


class _Skip(Exception):
    pass


def _stage_ingest(run: _Run):
    cfg = run.cfg
    found = []
    if cfg.path("registry"):
        run.registry = load_registry(cfg.path("registry"))
        found.append(f"{len(run.registry)} devices")
    if cfg.path("manifest"):
        run.corpus = load_manifest(cfg.path("manifest"))
        found.append(f"corpus {run.corpus.counts}")
        run.manifest.metrics["corpus_counts"] = run.corpus.counts
    if cfg.path("records"):
        run.records = read_records(cfg.path("records"))
        found.append(f"{len(run.records)} records")
    if not found:
        raise _Skip("no registry, manifest or records configured")
    return ", ".join(found)


def _clip_of(ref) -> AudioClip:
    return ref if isinstance(ref, AudioClip) else read_wav(ref)


def _latest_per_device(records):
    latest = {}
    for rec in records:
        if rec.audio_ref is None:
            continue
        cur = latest.get(rec.device_id)
        if cur is None or rec.captured_at >= cur.captured_at:
            latest[rec.device_id] = rec
    return latest


def _stage_features(run: _Run):
    cfg = run.cfg.cqcc
    labelled = []
    if run.corpus is not None:
        base = run.cfg.path("manifest").resolve().parent
        labelled = [r for r in run.corpus.records if r.label != "unlabeled"]
        for rec in labelled:
            p = Path(rec.path)
            clip = read_wav(p if p.is_absolute() else base / p)
            run.corpus_features[rec.path] = pool_features(cqcc_features(clip, cfg))
    for device_id, rec in sorted(_latest_per_device(run.records).items()):
        run.record_features[device_id] = pool_features(cqcc_features(_clip_of(rec.audio_ref), cfg))
    if not run.corpus_features and not run.record_features:
        raise _Skip("no audio to featurize")

    rel = Path("features/pooled.csv")
    with open(run.artifact(rel), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dim = 2 * cfg.n_cepstra
        w.writerow(["source", "id", "label"] + [f"f{j}" for j in range(dim)])
        for rec in labelled:
            w.writerow(["corpus", rec.path, rec.label] + [repr(float(v)) for v in run.corpus_features[rec.path]])
        for device_id, vec in sorted(run.record_features.items()):
            w.writerow(["record", device_id, ""] + [repr(float(v)) for v in vec])
    run.record_artifact(rel)
    return f"{len(run.corpus_features)} corpus clips, {len(run.record_features)} sensor clips"


def _stage_train(run: _Run):
    cfg = run.cfg
    if cfg.path("scores"):
        run.scores = load_scores(cfg.path("scores"))
        return f"using {len(run.scores)} external scores"
    if cfg.path("model"):
        run.model = load_model(cfg.path("model"))
        return f"loaded {run.model.kind} model"
    if run.corpus is None or not run.corpus_features:
        raise _Skip("no labelled corpus")

    labelled = DatasetManifest([r for r in run.corpus.records if r.label != "unlabeled"])
    train_set, val_set, test_set = split_dataset(labelled, cfg.split)

    def arrays(subset):
        X = np.array([run.corpus_features[r.path] for r in subset.records])
        return X, [r.label for r in subset.records]

    run.model = train(cfg["classifier"]["kind"], *arrays(train_set), cfg.train_params)
    save_model(run.model, run.artifact("model.json"))
    run.record_artifact("model.json")

    report = {"split_sizes": {"train": len(train_set), "val": len(val_set), "test": len(test_set)}}
    for name, subset in (("val", val_set), ("test", test_set)):
        if len(subset):
            report[name] = evaluate(run.model, *arrays(subset)).to_dict()
    if run.model.history:
        report["final_train_loss"] = run.model.history[-1]
    run.write_json("classification_metrics.json", report)
    run.manifest.metrics["classification"] = report
    return f"trained {run.model.kind}; split {report['split_sizes']}"


def _stage_classify(run: _Run):
    cfg = run.cfg
    threshold = cfg["classifier"]["threshold"]
    statuses = {}
    if cfg.path("statuses"):
        with open(cfg.path("statuses"), newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                statuses[row["device_id"]] = (row["label"], float(row["score"]))
    elif run.scores is not None:
        for device_id in sorted(_latest_per_device(run.records)) or sorted(run.scores):
            if device_id in run.scores:
                s = run.scores[device_id]
                statuses[device_id] = ("infested" if s >= threshold else "not_infested", s)
    elif run.model is not None and run.record_features:
        ids = sorted(run.record_features)
        _, scores = classify_many(run.model, np.array([run.record_features[i] for i in ids]))
        for device_id, s in zip(ids, scores):
            statuses[device_id] = ("infested" if s >= threshold else "not_infested", float(s))
    else:
        raise _Skip("no classifier output and no sensor audio")
    run.statuses = statuses

    rel = "statuses.csv"
    with open(run.artifact(rel), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["device_id", "label", "score"])
        for device_id, (label, score) in sorted(statuses.items()):
            w.writerow([device_id, label, repr(float(score))])
    run.record_artifact(rel)
    counts = {lab: sum(1 for v in statuses.values() if v[0] == lab) for lab in ("infested", "not_infested")}
    run.manifest.metrics["sensor_statuses"] = counts
    return f"{len(statuses)} devices classified {counts}"


def _stage_detections(run: _Run):
    cfg = run.cfg
    dcfg = cfg["detection"]
    if not cfg.path("detections"):
        raise _Skip("no detection file")
    dfile = load_detection_file(cfg.path("detections"))
    size = dfile.original_size or (tuple(dcfg["image_size"]) if dcfg["image_size"] else None)
    kept = nms(dfile.detections, dcfg["conf_threshold"], dcfg["iou_threshold"])
    if dfile.space == "network":
        if size is None:
            raise StageError("network-space detections need detection.image_size or a header size")
        kept = rescale_detections(kept, LetterboxTransform.fit(size[0], size[1], dcfg["network_size"]))
    run.detections = kept
    run.image_size = size
    write_detections(kept, run.artifact("detections_original.txt"), "original", size)
    run.record_artifact("detections_original.txt")
    summary = {"raw": len(dfile.detections), "kept": len(kept), "space": dfile.space}

    if cfg.path("truths"):
        truths = load_truths(cfg.path("truths"))
        report = evaluate_detections(kept, truths, dcfg["map_iou_thresholds"], dcfg["operating_threshold"])
        out = report.to_dict()
        out["loss"] = _detection_loss(kept, truths, dcfg["loss_weights"])
        run.write_json("detection_report.json", out)
        run.manifest.metrics["detection"] = {k: out[k] for k in ("precision", "recall", "map50", "map50_95")}
    run.manifest.metrics["detections"] = summary
    return f"{summary['kept']} of {summary['raw']} detections kept"


def _detection_loss(detections, truths, weights):
    pairs, unmatched_d, unmatched_g = [], [], []
    keys = sorted({(g.image_id, g.class_id) for g in truths} | {(d.image_id, d.class_id) for d in detections})
    for image_id, cls in keys:
        dets = [d for d in detections if d.image_id == image_id and d.class_id == cls]
        gts = [g for g in truths if g.image_id == image_id and g.class_id == cls]
        order, matches = match_detections(dets, gts, 0.5)
        for i, j in zip(order, matches):
            if j is None:
                unmatched_d.append(dets[i])
            else:
                pairs.append((dets[i], gts[j]))
        used = {j for j in matches if j is not None}
        unmatched_g.extend(g for j, g in enumerate(gts) if j not in used)
    loss = composite_loss(pairs, unmatched_d, unmatched_g, tuple(weights))
    return {"cls": loss.cls_loss, "loc": loss.loc_loss, "conf": loss.conf_loss, "total": loss.total}


def _stage_map(run: _Run):
    cfg = run.cfg
    if run.detections is None:
        raise _Skip("no detections")
    if not cfg.path("world_file"):
        raise _Skip("no world file")
    if run.registry is None:
        raise _Skip("no sensor registry")
    t = read_world_file(cfg.path("world_file"))
    classes = set(cfg["fusion"]["classes"])
    image_ids = sorted({d.image_id for d in run.detections})
    image_id = cfg["detection"]["image_id"]
    if image_id is None:
        if len(image_ids) > 1:
            raise StageError(f"detections cover {len(image_ids)} images; set detection.image_id")
        image_id = image_ids[0] if image_ids else ""
    boxes = [d.box for d in run.detections if d.image_id == image_id and d.class_id in classes]
    statuses = run.statuses or {}
    matched = match_sensors(boxes, run.registry, statuses, t, cfg["fusion"]["radius_m"])
    doc = generate_map(image_id, matched, t)

    with open(run.artifact("rpw_map.geojson"), "w", encoding="utf-8") as fh:
        json.dump(to_geojson(doc), fh, indent=1)
        fh.write("\n")
    run.record_artifact("rpw_map.geojson")
    size = run.image_size or (max((b.x2 for b in boxes), default=1.0), max((b.y2 for b in boxes), default=1.0))
    write_svg(doc, size, run.artifact("rpw_map.svg"))
    run.record_artifact("rpw_map.svg")
    run.manifest.metrics["map"] = doc.counts
    return f"map counts {doc.counts}"


_STAGE_FUNCS = {
    "ingest": _stage_ingest,
    "features": _stage_features,
    "train": _stage_train,
    "classify": _stage_classify,
    "detections": _stage_detections,
    "map": _stage_map,
}


def run_pipeline(cfg: PipelineConfig, stages=STAGES) -> RunManifest:
    """Run the selected stages in order and write ``run_manifest.json``.

    Stages whose inputs are absent are marked ``skipped`` and later stages
    carry on without them.  A failing stage is marked ``failed``; every stage
    after it is left ``not_run``.
    """
    manifest = RunManifest(config=_jsonable(cfg.snapshot()))
    manifest.created_at = datetime.now(timezone.utc).isoformat()
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, manifest)
    manifest.stages = [StageResult(name) for name in STAGES if name in stages]
    failed = False
    for result in manifest.stages:
        if failed:
            break
        start = time.perf_counter()
        try:
            result.message = _STAGE_FUNCS[result.name](run) or ""
            result.status = "ok"
        except _Skip as why:
            result.status = "skipped"
            result.message = str(why)
        except (WeevilError, OSError, KeyError, ValueError) as exc:
            log.error("stage %s failed: %s", result.name, exc)
            log.debug("traceback", exc_info=True)
            result.status = "failed"
            result.message = f"{type(exc).__name__}: {exc}"
            failed = True
        result.seconds = round(time.perf_counter() - start, 6)
        log.info("stage %-10s %s %s", result.name, result.status, result.message)
    manifest.write(cfg.output_dir)
    return manifest


def verify_manifest(directory) -> list:
    """Return artifact names whose file is missing or whose digest changed."""
    directory = Path(directory)
    with open(directory / MANIFEST_NAME, encoding="utf-8") as fh:
        data = json.load(fh)
    bad = []
    for rel, digest in data["artifacts"].items():
        p = directory / rel
        if not p.exists() or file_digest(p) != digest:
            bad.append(rel)
    return bad


def configure_logging():
    level = os.environ.get("WEEVILWATCH_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
