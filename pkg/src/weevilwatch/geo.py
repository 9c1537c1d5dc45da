"""Georeferencing of detected palms, sensor matching and RPW map output."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence
from xml.sax.saxutils import escape

from .errors import ConsistencyError, DomainError, FormatError, ValidationError

EARTH_RADIUS_M = 6_371_000.0
STATUSES = ("infested", "not_infested", "unknown")
STATUS_COLORS = {
    "infested": "#FF0000",
    "not_infested": "#0000FF",
    "unknown": "#808080",
}
_LEGEND = (("infested", "infested"), ("not_infested", "not infested"), ("unknown", "unknown"))


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and -90.0 <= self.lat <= 90.0):
            raise ValidationError(f"latitude {self.lat} outside [-90, 90]")
        if not (math.isfinite(self.lon) and -180.0 <= self.lon <= 180.0):
            raise ValidationError(f"longitude {self.lon} outside [-180, 180]")


def haversine(p: GeoPoint, q: GeoPoint, radius: float = EARTH_RADIUS_M) -> float:
    """Great-circle distance in metres on a spherical earth."""
    phi1, phi2 = math.radians(p.lat), math.radians(q.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(q.lon - p.lon)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2.0 * radius * math.asin(min(1.0, math.sqrt(a)))


@dataclass(frozen=True)
class PixelToGeoTransform:
    """World-file affine: ``lon = a*px + b*py + c``, ``lat = d*px + e*py + f``."""

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    def __post_init__(self):
        coeffs = (self.a, self.b, self.c, self.d, self.e, self.f)
        if not all(math.isfinite(v) for v in coeffs):
            raise DomainError("non-finite world-file coefficient")
        if self.determinant == 0.0:
            raise DomainError("pixel-to-geo transform is not invertible")

    @property
    def determinant(self) -> float:
        return self.a * self.e - self.b * self.d

    def apply(self, px: float, py: float):
        """Return ``(lon, lat)`` for a pixel position without range checks."""
        return self.a * px + self.b * py + self.c, self.d * px + self.e * py + self.f

    def invert(self, lon: float, lat: float):
        u, v = lon - self.c, lat - self.f
        det = self.determinant
        return (self.e * u - self.b * v) / det, (self.a * v - self.d * u) / det


def pixel_to_geo(t: PixelToGeoTransform, px) -> GeoPoint:
    lon, lat = t.apply(px[0], px[1])
    return GeoPoint(lat, lon)


def geo_to_pixel(t: PixelToGeoTransform, point: GeoPoint):
    return t.invert(point.lon, point.lat)


def read_world_file(path) -> PixelToGeoTransform:
    """Parse the six-line world file (order a, d, b, e, c, f)."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if len(lines) != 6:
        raise FormatError(f"world file needs 6 numeric lines, found {len(lines)}")
    try:
        a, d, b, e, c, f = (float(v) for v in lines)
    except ValueError as exc:
        raise FormatError(f"world file: {exc}") from exc
    return PixelToGeoTransform(a, b, c, d, e, f)


def write_world_file(t: PixelToGeoTransform, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(repr(float(v)) for v in (t.a, t.d, t.b, t.e, t.c, t.f)) + "\n")


# --------------------------------------------------------------------------
# matching and map assembly
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PalmStatus:
    status: str = "unknown"
    score: Optional[float] = None
    source_device: Optional[str] = None
    distance_m: Optional[float] = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValidationError(f"unknown status {self.status!r}")
        if self.status == "unknown":
            if self.score is not None or self.source_device is not None:
                raise ValidationError("unknown status carries no score or device")
        else:
            if self.score is None or self.source_device is None:
                raise ValidationError("classified status needs a score and a device")
            if not 0.0 <= self.score <= 1.0:
                raise ValidationError(f"score {self.score} outside [0, 1]")


def box_center_geo(box, t: PixelToGeoTransform) -> GeoPoint:
    return pixel_to_geo(t, box.center)


def match_sensors(boxes: Sequence, registry, statuses: Mapping, t: PixelToGeoTransform,
                  radius_m: float = 5.0) -> list:
    """Attach sensor classifications to detected palm boxes.

    ``statuses`` maps device id to ``(label, score)``.  All (box, device)
    pairs within ``radius_m`` are considered globally nearest-first, so each
    device and each box is used at most once and the result does not depend
    on input order.  Boxes left over get the ``unknown`` status.
    """
    if not radius_m > 0:
        raise DomainError("radius_m must be positive")
    entries = registry.entries if hasattr(registry, "entries") else registry
    absent = sorted(set(statuses) - set(entries))
    if absent:
        raise ConsistencyError(f"classified devices missing from registry: {absent}")

    centers = [box_center_geo(b, t) for b in boxes]
    candidates = []
    for i, c in enumerate(centers):
        for device_id in statuses:
            dist = haversine(c, entries[device_id])
            if dist <= radius_m:
                candidates.append((dist, device_id, boxes[i].as_tuple(), i))
    candidates.sort(key=lambda x: x[:3])

    taken_boxes, taken_devices = {}, set()
    for dist, device_id, _, i in candidates:
        if i in taken_boxes or device_id in taken_devices:
            continue
        taken_boxes[i] = (device_id, dist)
        taken_devices.add(device_id)

    out = []
    for i, box in enumerate(boxes):
        if i in taken_boxes:
            device_id, dist = taken_boxes[i]
            label, score = statuses[device_id]
            out.append((box, PalmStatus(label, float(score), device_id, dist)))
        else:
            out.append((box, PalmStatus()))
    return out


@dataclass(frozen=True)
class MapEntry:
    box: object
    center: GeoPoint
    status: PalmStatus
    color: str


@dataclass(frozen=True)
class RpwMapDocument:
    image_id: str
    entries: tuple
    transform: PixelToGeoTransform

    @property
    def counts(self) -> dict:
        tally = Counter(e.status.status for e in self.entries)
        return {s: tally.get(s, 0) for s in STATUSES}


def generate_map(image_id: str, matched: Sequence, t: PixelToGeoTransform) -> RpwMapDocument:
    entries = tuple(
        MapEntry(box, box_center_geo(box, t), status, STATUS_COLORS[status.status])
        for box, status in matched
    )
    return RpwMapDocument(image_id, entries, t)


def to_geojson(doc: RpwMapDocument) -> dict:
    features = []
    for e in doc.entries:
        b = e.box
        corners = [(b.x1, b.y1), (b.x2, b.y1), (b.x2, b.y2), (b.x1, b.y2), (b.x1, b.y1)]
        ring = [list(doc.transform.apply(x, y)) for x, y in corners]
        features.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [ring]},
            "properties": {
                "status": e.status.status,
                "score": e.status.score,
                "device_id": e.status.source_device,
                "color": e.color,
                "center": [e.center.lon, e.center.lat],
                "pixel_box": list(b.as_tuple()),
            },
        })
    return {
        "type": "FeatureCollection",
        "properties": {"image_id": doc.image_id, "counts": doc.counts},
        "features": features,
    }


def write_geojson(doc: RpwMapDocument, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_geojson(doc), fh, indent=1)
        fh.write("\n")


def render_svg(doc: RpwMapDocument, background_size, background_href: Optional[str] = None) -> str:
    """Status-coloured box outlines over a ``(width, height)`` pixel canvas."""
    w, h = background_size
    stroke = max(2.0, min(w, h) / 400.0)
    font = max(12.0, min(w, h) / 60.0)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" '
        f'width="{w:g}" height="{h:g}" viewBox="0 0 {w:g} {h:g}">',
        f"<title>RPW map {escape(str(doc.image_id))}</title>",
    ]
    if background_href:
        out.append(f'<image x="0" y="0" width="{w:g}" height="{h:g}" '
                   f'xlink:href="{escape(background_href)}"/>')
    else:
        out.append(f'<rect x="0" y="0" width="{w:g}" height="{h:g}" fill="#FFFFFF"/>')
    out.append('<g class="boxes" fill="none">')
    for e in doc.entries:
        b = e.box
        dev = e.status.source_device or ""
        out.append(
            f'<rect x="{b.x1!r}" y="{b.y1!r}" width="{b.width!r}" height="{b.height!r}" '
            f'stroke="{e.color}" stroke-width="{stroke:g}" data-status="{e.status.status}" '
            f'data-device="{escape(dev)}"/>'
        )
    out.append("</g>")
    out.append('<g class="legend">')
    y = font * 1.5
    for status, text in _LEGEND:
        out.append(f'<rect x="{font:g}" y="{y - font:g}" width="{font:g}" height="{font:g}" '
                   f'fill="{STATUS_COLORS[status]}"/>')
        out.append(f'<text x="{font * 2.5:g}" y="{y:g}" font-size="{font:g}" '
                   f'font-family="sans-serif">{text}</text>')
        y += font * 1.5
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(doc: RpwMapDocument, background_size, path, background_href=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_svg(doc, background_size, background_href))
