"""
Putting sensor verdicts on the map
==================================

A world file ties image pixels to longitude and latitude.  Each detected
palm takes the classification of the nearest unused sensor within a few
metres; palms without one are shown as unknown.
"""

import tempfile
from pathlib import Path

from weevilwatch.detection import BoundingBox
from weevilwatch.geo import (
    GeoPoint,
    generate_map,
    haversine,
    match_sensors,
    pixel_to_geo,
    write_geojson,
    write_svg,
)
from weevilwatch.ingest import SensorRegistry
from weevilwatch.synthetic import farm_transform

t = farm_transform()  # 5 cm per pixel, north up
print("1 degree of longitude at the equator:", round(haversine(GeoPoint(0, 0), GeoPoint(0, 1))), "m")

boxes = [BoundingBox(400, 300, 600, 500), BoundingBox(1400, 300, 1600, 500), BoundingBox(2400, 300, 2600, 500)]
registry = SensorRegistry({
    "P001": pixel_to_geo(t, (505, 400)),
    "P002": pixel_to_geo(t, (1500, 410)),
})
statuses = {"P001": ("infested", 0.97), "P002": ("not_infested", 0.04)}

matched = match_sensors(boxes, registry, statuses, t, radius_m=5.0)
for box, status in matched:
    print(box.center, status)

doc = generate_map("demo", matched, t)
print("counts:", doc.counts)

out = Path(tempfile.mkdtemp())
write_geojson(doc, out / "rpw_map.geojson")
write_svg(doc, (3000, 800), out / "rpw_map.svg")
print("map written to", out)
