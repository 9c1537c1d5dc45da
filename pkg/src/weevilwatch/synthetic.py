"""Synthetic recordings and a synthetic farm for tests and demos.

Infested trunks are modelled as a train of short broadband bursts (larval
chewing) on top of a quiet background; clean trunks are the quiet
background alone.
"""

from __future__ import annotations

import csv
import json
import math
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
import yaml

from .detection import (
    BoundingBox,
    Detection,
    GroundTruth,
    LetterboxTransform,
    original_to_letterbox,
    write_detections,
    write_truths,
)
from .geo import PixelToGeoTransform, pixel_to_geo, write_world_file
from .ingest import AudioClip, DatasetManifest, ManifestRecord, write_manifest, write_wav

DEFAULT_RATE = 8000
DEFAULT_DURATION = 10.0


def background_clip(rng, sample_rate=DEFAULT_RATE, duration=DEFAULT_DURATION, level=0.01):
    n = int(round(sample_rate * duration))
    return AudioClip(sample_rate, np.clip(level * rng.standard_normal(n), -1, 1))


def burst_train_clip(rng, sample_rate=DEFAULT_RATE, duration=DEFAULT_DURATION, level=0.01,
                     rate_hz=6.0, burst_ms=4.0, burst_level=0.4):
    """Background noise plus Poisson-timed decaying white-noise bursts."""
    n = int(round(sample_rate * duration))
    x = level * rng.standard_normal(n)
    blen = max(1, int(sample_rate * burst_ms / 1000.0))
    envelope = np.exp(-np.arange(blen) / (blen / 3.0))
    t = rng.exponential(1.0 / rate_hz)
    while t < duration:
        start = int(t * sample_rate)
        seg = min(blen, n - start)
        amp = burst_level * rng.uniform(0.5, 1.0)
        x[start:start + seg] += amp * envelope[:seg] * rng.standard_normal(seg)
        t += rng.exponential(1.0 / rate_hz)
    return AudioClip(sample_rate, np.clip(x, -1, 1))


def tone_clip(k, config, sample_rate=DEFAULT_RATE, duration=1.0, amplitude=0.9, phase=0.0):
    """Pure cosine at the centre frequency of CQT bin ``k``."""
    n = np.arange(int(round(sample_rate * duration)))
    f = config.bin_frequency(k, sample_rate)
    return AudioClip(sample_rate, amplitude * np.cos(2 * np.pi * f / sample_rate * n + phase))


def make_clip(label, rng, sample_rate=DEFAULT_RATE, duration=DEFAULT_DURATION):
    if label == "infested":
        return burst_train_clip(rng, sample_rate, duration)
    return background_clip(rng, sample_rate, duration)


def make_corpus(directory, n_per_class=100, seed=0, sample_rate=DEFAULT_RATE, duration=DEFAULT_DURATION):
    """Write ``2 * n_per_class`` labelled WAV clips and ``manifest.csv``."""
    directory = Path(directory)
    (directory / "clips").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_per_class):
        for label in ("infested", "not_infested"):
            name = f"clips/{label}_{i:04d}.wav"
            clip = make_clip(label, rng, sample_rate, duration)
            (directory / name).write_bytes(write_wav(clip))
            records.append(ManifestRecord(name, label))
    manifest = DatasetManifest(records)
    write_manifest(manifest, directory / "manifest.csv")
    return manifest


def farm_transform(lat0=24.7136, lon0=46.6753, gsd_m=0.05):
    """North-up world file for a UAV image with ``gsd_m`` metres per pixel."""
    deg_lat = gsd_m / 111_195.0
    deg_lon = deg_lat / math.cos(math.radians(lat0))
    return PixelToGeoTransform(deg_lon, 0.0, lon0, 0.0, -deg_lat, lat0)


def make_farm(directory, n_palms=20, n_infested=5, seed=45, image_size=(4000, 3000),
              network_size=1280, n_train_per_class=40, clip_seconds=DEFAULT_DURATION):
    """Lay out a complete synthetic farm run under ``directory``.

    Writes the training corpus, per-palm sensor recordings (wire-format
    ``records.jsonl``), the registry, a world file, network-space detections
    with duplicates and low-confidence clutter, original-space ground truth
    and a ready-to-run ``config.yaml``.  Returns a dict describing the
    injected truth.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    make_corpus(directory / "train", n_train_per_class, seed=seed + 1, duration=clip_seconds)

    W, H = image_size
    t = farm_transform()
    write_world_file(t, directory / "farm.wld")

    cols = 5
    rows = math.ceil(n_palms / cols)
    truths, dets, registry = [], [], []
    for i in range(n_palms):
        r, c = divmod(i, cols)
        cx = (c + 0.5) * W / cols + rng.uniform(-60, 60)
        cy = (r + 0.5) * H / rows + rng.uniform(-60, 60)
        half = rng.uniform(80, 140)
        box = BoundingBox(cx - half, cy - half, cx + half, cy + half)
        truths.append(GroundTruth(box, "palm", "farm"))
        jitter = rng.uniform(-4, 4, size=4)
        det_box = BoundingBox(*(np.array(box.as_tuple()) + jitter))
        dets.append(Detection(det_box, "palm", float(rng.uniform(0.7, 0.98)), "farm"))
        # near-duplicate that NMS must remove
        dup = BoundingBox(*(np.array(box.as_tuple()) + rng.uniform(-10, 10, size=4)))
        dets.append(Detection(dup, "palm", float(rng.uniform(0.3, 0.6)), "farm"))
        device_id = f"P{i + 1:03d}"
        registry.append((device_id, pixel_to_geo(t, box.center)))

    # clutter below the confidence threshold and one non-palm tree
    for _ in range(5):
        x, y = rng.uniform(0, W - 200), rng.uniform(0, H - 200)
        dets.append(Detection(BoundingBox(x, y, x + 150, y + 150), "palm",
                              float(rng.uniform(0.01, 0.1)), "farm"))
    tree = BoundingBox(W * 0.02, H * 0.02, W * 0.02 + 180, H * 0.02 + 180)
    truths.append(GroundTruth(tree, "tree", "farm"))
    dets.append(Detection(tree, "tree", 0.88, "farm"))

    lb = LetterboxTransform.fit(W, H, network_size)
    net_dets = [Detection(original_to_letterbox(d.box, lb), d.class_id, d.confidence, d.image_id)
                for d in dets]
    order = rng.permutation(len(net_dets))
    write_detections([net_dets[i] for i in order], directory / "detections.txt",
                     space="network", original_size=(W, H))
    write_truths(truths, directory / "truths.txt")

    with open(directory / "registry.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["device_id", "lat", "lon"])
        for device_id, p in registry:
            w.writerow([device_id, repr(p.lat), repr(p.lon)])

    infested = set(rng.choice(n_palms, size=n_infested, replace=False).tolist())
    (directory / "sensors").mkdir(exist_ok=True)
    start = datetime(2023, 6, 1, 4, 0, tzinfo=timezone.utc)
    with open(directory / "records.jsonl", "w", encoding="utf-8") as fh:
        for i, (device_id, p) in enumerate(registry):
            label = "infested" if i in infested else "not_infested"
            clip = make_clip(label, rng, duration=clip_seconds)
            name = f"sensors/{device_id}.wav"
            (directory / name).write_bytes(write_wav(clip))
            rec = {
                "device_id": device_id,
                "captured_at": (start + timedelta(minutes=i)).isoformat().replace("+00:00", "Z"),
                "lat": p.lat,
                "lon": p.lon,
                "temperature_c": round(float(rng.uniform(28, 38)), 1),
                "humidity_pct": round(float(rng.uniform(15, 45)), 1),
                "audio_path": name,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    config = {
        "version": 1,
        "paths": {
            "registry": "registry.csv",
            "manifest": "train/manifest.csv",
            "records": "records.jsonl",
            "detections": "detections.txt",
            "truths": "truths.txt",
            "world_file": "farm.wld",
            "output_dir": "out",
        },
        "classifier": {"kind": "logistic", "seed": 45},
        "detection": {"network_size": network_size, "image_size": [W, H], "image_id": "farm"},
        "fusion": {"radius_m": 5.0},
    }
    with open(directory / "config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(config, fh, sort_keys=False)

    return {
        "infested_devices": sorted(registry[i][0] for i in infested),
        "n_palms": n_palms,
        "config": directory / "config.yaml",
    }
