"""
A whole farm, end to end
========================

``make_farm`` lays out 20 palms, a sensor on each, five of them infested,
network-space detections with duplicates and clutter, and a config file.
``run-all`` then goes from raw audio and boxes to a coloured map.
"""

import json
import tempfile
from pathlib import Path

from weevilwatch.cli import main
from weevilwatch.synthetic import make_farm

root = Path(tempfile.mkdtemp())
info = make_farm(root)
print("infested sensors:", info["infested_devices"])

code = main(["run-all", "--config", str(info["config"]), "--override", "fusion.radius_m=4"])
print("exit code", code)

manifest = json.loads((root / "out" / "run_manifest.json").read_text())
for name, digest in manifest["artifacts"].items():
    print(f"{digest[:12]}  {name}")
