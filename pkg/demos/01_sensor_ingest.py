"""
Receiving sensor records
========================

Trunk sensors send one JSON object per line.  Each line is answered with
``OK`` or ``ERR <reason>``, and a bad line never stops the stream.
"""

import base64
import io
import json

import numpy as np

from weevilwatch.ingest import AudioClip, ingest_stream, parse_wav, write_wav

# a short 8 kHz clip, shipped inline as base64 WAV
rng = np.random.default_rng(0)
clip = AudioClip(8000, 0.05 * rng.standard_normal(4000))
wav = write_wav(clip, "pcm16")
print("WAV bytes:", len(wav), "->", parse_wav(wav).duration_s, "s")

good = {
    "device_id": "P001",
    "captured_at": "2023-06-01T07:00:00+03:00",
    "lat": 24.7136,
    "lon": 46.6753,
    "temperature_c": 33.1,
    "humidity_pct": 28.0,
    "audio_b64": base64.b64encode(wav).decode(),
}
stream = io.BytesIO(
    (json.dumps(good) + "\n"
     + '{"device_id": "P002", "lat": 95}\n'
     + json.dumps(dict(good, device_id="P003", audio_b64=None)) + "\n").encode()
)

replies = io.BytesIO()
for record in ingest_stream(stream, replies):
    print(record.device_id, record.captured_at.isoformat(), record.geo)

print(replies.getvalue().decode())

# The same handler runs behind a threaded TCP server:
#   weevilwatch ingest-listen --port 9750 --output received.jsonl
