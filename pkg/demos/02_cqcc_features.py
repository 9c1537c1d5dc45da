"""
Constant-Q cepstral features
============================

A clip is cut into frames of 512 samples with a hop of 256.  Each frame is
projected onto 96 bins, log-compressed, standardised per bin over time, and
finally turned into 20 cepstral coefficients by an orthonormal DCT.
"""

import tempfile
from pathlib import Path

import numpy as np

from weevilwatch.cqcc import (
    CqccConfig,
    cqcc_features,
    cqt,
    features_to_image,
    log_compress,
    normalized_spectrum,
    write_image,
)
from weevilwatch.synthetic import burst_train_clip, tone_clip

cfg = CqccConfig()
rng = np.random.default_rng(1)
clip = burst_train_clip(rng, duration=2.0)

F = cqcc_features(clip, cfg)
print("features:", F.shape)

normed = normalized_spectrum(clip, cfg)
print("per-bin mean after normalisation (should be ~0):", np.abs(normed.values.mean(axis=0)).max())

# %%
# A pure tone at the centre of bin 30 peaks in bin 30 of the log spectrum.
# After per-bin standardisation it disappears: a stationary tone does not
# vary from frame to frame, so every bin is constant and maps to zero.

rect = CqccConfig(window="rectangular")
tone = tone_clip(30, rect)
log_spec = log_compress(cqt(tone, rect), rect.mu).mean(axis=0)
print("tone peak bin:", int(np.argmax(log_spec)))
print("largest per-bin std of the tone:", normalized_spectrum(tone, rect).std.max())

# %%
# The matrix can be rendered as a 299x299 grey image for image classifiers.

out = Path(tempfile.mkdtemp())
write_image(features_to_image(F, 299, 299), out / "cqcc.png")
print("image written to", out / "cqcc.png")
