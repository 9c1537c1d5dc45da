"""Sensor-side inputs: WAV clips, the device registry, dataset manifests and
the newline-delimited record stream sent by palm-mounted recorders."""

from __future__ import annotations

import base64
import binascii
import csv
import json
import logging
import math
import socketserver
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import BinaryIO, Callable, Iterator, Mapping, Optional, Union

import numpy as np

from .errors import (
    ConflictError,
    EmptyAudioError,
    FormatError,
    UnsupportedEncodingError,
    ValidationError,
)
from .geo import GeoPoint

log = logging.getLogger(__name__)

LABELS = ("infested", "not_infested", "unlabeled")
MAX_LINE_BYTES = 1 << 20

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class AudioClip:
    sample_rate: int
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if samples.size and (not np.all(np.isfinite(samples)) or np.abs(samples).max() > 1.0):
            raise ValidationError("samples must be finite and within [-1, 1]")
        samples = samples.copy()
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class SensorRecord:
    device_id: str
    captured_at: datetime
    geo: GeoPoint
    temperature_c: Optional[float] = None
    humidity_pct: Optional[float] = None
    audio_ref: Union[str, AudioClip, None] = None

    def __post_init__(self):
        if not isinstance(self.device_id, str) or not self.device_id.strip():
            raise ValidationError("device_id must be a non-empty string")
        if self.captured_at.tzinfo is None:
            raise ValidationError("captured_at must carry a UTC offset")
        if self.temperature_c is not None and not math.isfinite(self.temperature_c):
            raise ValidationError("temperature_c must be finite")
        if self.humidity_pct is not None and not 0.0 <= self.humidity_pct <= 100.0:
            raise ValidationError(f"humidity_pct {self.humidity_pct} outside [0, 100]")


@dataclass(frozen=True)
class SensorRegistry:
    entries: Mapping[str, GeoPoint]

    def __post_init__(self):
        object.__setattr__(self, "entries", dict(self.entries))

    def __getitem__(self, device_id: str) -> GeoPoint:
        return self.entries[device_id]

    def __contains__(self, device_id) -> bool:
        return device_id in self.entries

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: str


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        for rec in self.records:
            if rec.label not in LABELS:
                raise ValidationError(f"unknown label {rec.label!r} for {rec.path}")

    @property
    def counts(self) -> dict:
        tally = Counter(r.label for r in self.records)
        return {label: tally.get(label, 0) for label in LABELS}

    def __len__(self):
        return len(self.records)


# --------------------------------------------------------------------------
# WAV
# --------------------------------------------------------------------------

def parse_wav(data: bytes) -> AudioClip:
    """Decode a mono RIFF/WAVE container into an :class:`AudioClip`.

    Integer PCM is divided by ``2**(bits-1)`` (8-bit data is unsigned and
    re-centred first); float data is clipped to [-1, 1].
    """
    data = bytes(data)
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE container")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size and chunk_id != b"data":
            raise FormatError(f"truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            fmt = body
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)

    if fmt is None or len(fmt) < 16:
        raise FormatError("missing or short fmt chunk")
    if payload is None:
        raise FormatError("missing data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 40:
            raise FormatError("short WAVE_FORMAT_EXTENSIBLE fmt chunk")
        (tag,) = struct.unpack("<H", fmt[24:26])
    if channels != 1:
        raise UnsupportedEncodingError(f"{channels} channels; only mono is supported")
    if rate == 0:
        raise FormatError("sample rate of 0")

    if tag == _WAVE_FORMAT_PCM:
        samples = _decode_pcm(payload, bits)
    elif tag == _WAVE_FORMAT_IEEE_FLOAT:
        if bits not in (32, 64):
            raise UnsupportedEncodingError(f"{bits}-bit float")
        n = len(payload) // (bits // 8)
        samples = np.frombuffer(payload[:n * (bits // 8)], dtype=f"<f{bits // 8}").astype(np.float64)
        if not np.all(np.isfinite(samples)):
            raise FormatError("non-finite float samples")
        samples = np.clip(samples, -1.0, 1.0)
    else:
        raise UnsupportedEncodingError(f"format tag 0x{tag:04x} is not PCM or IEEE float")

    if samples.size == 0:
        raise EmptyAudioError("data chunk holds no samples")
    return AudioClip(rate, samples)


def _decode_pcm(payload: bytes, bits: int) -> np.ndarray:
    if bits == 8:
        raw = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
        return (raw - 128.0) / 128.0
    if bits == 16:
        raw = np.frombuffer(payload[:len(payload) // 2 * 2], dtype="<i2")
    elif bits == 24:
        b = np.frombuffer(payload[:len(payload) // 3 * 3], dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        raw = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        raw = np.where(raw & 0x800000, raw - (1 << 24), raw)
    elif bits == 32:
        raw = np.frombuffer(payload[:len(payload) // 4 * 4], dtype="<i4")
    else:
        raise UnsupportedEncodingError(f"{bits}-bit integer PCM")
    return raw.astype(np.float64) / float(1 << (bits - 1))


def write_wav(clip: AudioClip, encoding: str = "pcm16") -> bytes:
    """Serialize a clip as mono PCM16 (``"pcm16"``) or float32 (``"float32"``)."""
    x = clip.samples
    if encoding == "pcm16":
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        tag, bits = _WAVE_FORMAT_PCM, 16
    elif encoding == "float32":
        q = x.astype("<f4")
        tag, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    body = q.tobytes()
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, clip.sample_rate, clip.sample_rate * block, block, bits)
    out = b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(body)) + b"WAVE"
    out += b"fmt " + struct.pack("<I", len(fmt)) + fmt
    out += b"data" + struct.pack("<I", len(body)) + body
    if len(body) & 1:
        out += b"\x00"
    return out


def read_wav(path) -> AudioClip:
    return parse_wav(Path(path).read_bytes())


# --------------------------------------------------------------------------
# registry and manifest files
# --------------------------------------------------------------------------

def load_registry(path) -> SensorRegistry:
    """Read a ``device_id,lat,lon`` CSV into a :class:`SensorRegistry`."""
    entries = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return SensorRegistry({})
        missing = {"device_id", "lat", "lon"} - set(reader.fieldnames)
        if missing:
            raise FormatError(f"registry header lacks {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            device_id = (row["device_id"] or "").strip()
            if not device_id:
                raise ValidationError(f"line {lineno}: empty device_id")
            try:
                point = GeoPoint(float(row["lat"]), float(row["lon"]))
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"line {lineno}: {exc}") from exc
            if device_id in entries:
                raise ConflictError(f"line {lineno}: duplicate device_id {device_id!r}")
            entries[device_id] = point
    return SensorRegistry(entries)


def write_registry(registry: SensorRegistry, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["device_id", "lat", "lon"])
        for device_id, p in registry.entries.items():
            w.writerow([device_id, repr(p.lat), repr(p.lon)])


def load_manifest(path) -> DatasetManifest:
    """Read a ``path,label`` CSV. Unknown labels raise :class:`ValidationError`."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is not None and not {"path", "label"} <= set(reader.fieldnames):
            raise FormatError("manifest header must be 'path,label'")
        for lineno, row in enumerate(reader, start=2):
            label = (row["label"] or "").strip()
            if label not in LABELS:
                raise ValidationError(f"line {lineno}: unknown label {label!r}")
            records.append(ManifestRecord(row["path"], label))
    return DatasetManifest(records)


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for rec in manifest.records:
            w.writerow([rec.path, rec.label])


# --------------------------------------------------------------------------
# record wire format
# --------------------------------------------------------------------------

_RECORD_KEYS = {"device_id", "captured_at", "lat", "lon", "temperature_c",
                "humidity_pct", "audio_b64", "audio_path"}


def _number(obj, key, required=True):
    value = obj.get(key)
    if value is None:
        if required:
            raise ValidationError(f"missing {key}")
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"{key} must be a number")
    value = float(value)
    if not math.isfinite(value):
        raise ValidationError(f"{key} must be finite")
    return value


def parse_record(line: Union[str, bytes]) -> SensorRecord:
    """Validate one wire-format line (a JSON object) into a SensorRecord."""
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ValidationError("line is not UTF-8") from exc
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"not a JSON object: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ValidationError("not a JSON object")
    unknown = set(obj) - _RECORD_KEYS
    if unknown:
        raise ValidationError(f"unknown keys {sorted(unknown)}")

    device_id = obj.get("device_id")
    if not isinstance(device_id, str) or not device_id.strip():
        raise ValidationError("device_id must be a non-empty string")

    stamp = obj.get("captured_at")
    if not isinstance(stamp, str):
        raise ValidationError("captured_at must be an ISO-8601 string")
    try:
        captured = datetime.fromisoformat(stamp.replace("Z", "+00:00"))
    except ValueError as exc:
        raise ValidationError(f"bad captured_at {stamp!r}") from exc
    if captured.tzinfo is None:
        raise ValidationError("captured_at lacks a UTC designator")
    captured = captured.astimezone(timezone.utc)

    geo = GeoPoint(_number(obj, "lat"), _number(obj, "lon"))
    audio_b64 = obj.get("audio_b64")
    audio_path = obj.get("audio_path")
    if audio_b64 is not None and audio_path is not None:
        raise ValidationError("give audio_b64 or audio_path, not both")
    audio_ref = None
    if audio_b64 is not None:
        if not isinstance(audio_b64, str):
            raise ValidationError("audio_b64 must be a string")
        try:
            audio_ref = parse_wav(base64.b64decode(audio_b64, validate=True))
        except binascii.Error as exc:
            raise ValidationError("audio_b64 is not valid base64") from exc
        except FormatError as exc:
            raise ValidationError(f"audio_b64: {exc}") from exc
    elif audio_path is not None:
        if not isinstance(audio_path, str) or not audio_path:
            raise ValidationError("audio_path must be a non-empty string")
        audio_ref = audio_path

    return SensorRecord(
        device_id=device_id,
        captured_at=captured,
        geo=geo,
        temperature_c=_number(obj, "temperature_c", required=False),
        humidity_pct=_number(obj, "humidity_pct", required=False),
        audio_ref=audio_ref,
    )


def format_record(record: SensorRecord, audio_encoding: str = "pcm16") -> str:
    """Inverse of :func:`parse_record`; inline clips are base64-encoded."""
    obj = {
        "device_id": record.device_id,
        "captured_at": record.captured_at.astimezone(timezone.utc).isoformat().replace("+00:00", "Z"),
        "lat": record.geo.lat,
        "lon": record.geo.lon,
    }
    if record.temperature_c is not None:
        obj["temperature_c"] = record.temperature_c
    if record.humidity_pct is not None:
        obj["humidity_pct"] = record.humidity_pct
    if isinstance(record.audio_ref, AudioClip):
        obj["audio_b64"] = base64.b64encode(write_wav(record.audio_ref, audio_encoding)).decode("ascii")
    elif record.audio_ref is not None:
        obj["audio_path"] = record.audio_ref
    return json.dumps(obj, sort_keys=True)


def ingest_stream(reader: BinaryIO, writer: Optional[BinaryIO] = None,
                  known_devices=None, max_line: int = MAX_LINE_BYTES) -> Iterator[SensorRecord]:
    """Yield validated records from a newline-delimited byte stream.

    Each line is answered on ``writer`` with ``OK`` or ``ERR <reason>``.  Bad
    lines never end the stream.  A dropped connection simply ends the
    iteration; records already yielded are unaffected.
    """
    while True:
        try:
            line = reader.readline(max_line + 1)
        except (ConnectionError, OSError):
            return
        if not line:
            return
        if len(line) > max_line and not line.endswith(b"\n"):
            # drain the rest of the oversized line
            while line and not line.endswith(b"\n"):
                try:
                    line = reader.readline(max_line + 1)
                except (ConnectionError, OSError):
                    return
            _respond(writer, f"ERR line exceeds {max_line} bytes")
            continue
        line = line.rstrip(b"\r\n")
        if not line.strip():
            continue
        try:
            record = parse_record(line)
            if known_devices is not None and record.device_id not in known_devices:
                raise ValidationError(f"unknown device {record.device_id!r}")
        except ValidationError as exc:
            _respond(writer, f"ERR {exc}")
            continue
        _respond(writer, "OK")
        yield record


def _respond(writer, text):
    if writer is None:
        return
    try:
        writer.write(text.replace("\n", " ").encode("utf-8") + b"\n")
        writer.flush()
    except (ConnectionError, OSError, ValueError):
        pass


def read_records(path) -> list:
    """Read a file of wire-format lines, raising on the first invalid one.

    Relative ``audio_path`` values are resolved against the file's folder.
    """
    base = Path(path).resolve().parent
    out = []
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = parse_record(line)
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            if isinstance(rec.audio_ref, str) and not Path(rec.audio_ref).is_absolute():
                rec = SensorRecord(rec.device_id, rec.captured_at, rec.geo, rec.temperature_c,
                                   rec.humidity_pct, str(base / rec.audio_ref))
            out.append(rec)
    return out


class _RecordHandler(socketserver.StreamRequestHandler):
    def handle(self):
        server = self.server
        for record in ingest_stream(self.rfile, self.wfile, server.known_devices):
            server.sink(record)


class RecordListener(socketserver.ThreadingTCPServer):
    """Threaded TCP listener; every connection is parsed independently and
    accepted records are handed to ``sink`` (called under a lock)."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, sink: Callable[[SensorRecord], None], known_devices=None):
        lock = threading.Lock()

        def locked_sink(record):
            with lock:
                sink(record)

        self.sink = locked_sink
        self.known_devices = known_devices
        super().__init__(address, _RecordHandler)


def jsonl_sink(path) -> Callable[[SensorRecord], None]:
    """Sink appending each accepted record to ``path`` in wire format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def write(record):
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(format_record(record) + "\n")
        log.info("record from %s", record.device_id)

    return write
