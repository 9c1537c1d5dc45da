"""
From raw detections to mAP
==========================

Detections come out of the network on a square letterboxed canvas.  They
are thresholded, de-duplicated with class-aware NMS, mapped back to the
original image and scored against ground truth.
"""

from weevilwatch.detection import (
    AlignmentParams,
    BoundingBox,
    Detection,
    GroundTruth,
    LetterboxTransform,
    alignment_score,
    composite_loss,
    evaluate_detections,
    grid_scales,
    nms,
    rescale_detections,
)

print("grids for a 1280 input:", grid_scales(1280))

t = LetterboxTransform.fit(4000, 3000, 1280)
print("letterbox scale and padding:", t.scale, t.pad_x, t.pad_y)

raw = [
    Detection(BoundingBox(0, 160, 320, 480), "palm", 0.91, "farm"),
    Detection(BoundingBox(4, 162, 318, 479), "palm", 0.55, "farm"),   # duplicate
    Detection(BoundingBox(600, 400, 700, 500), "palm", 0.10, "farm"),  # clutter
    Detection(BoundingBox(640, 300, 720, 380), "tree", 0.80, "farm"),
]
kept = rescale_detections(nms(raw, conf_threshold=0.25, iou_threshold=0.7), t)
for d in kept:
    print(d.class_id, d.confidence, d.box.as_tuple())

truths = [
    GroundTruth(BoundingBox(0, 0, 1000, 1000), "palm", "farm"),
    GroundTruth(BoundingBox(2000, 437.5, 2250, 687.5), "tree", "farm"),
]
report = evaluate_detections(kept, truths)
print("mAP@50 = %.3f  mAP@50-95 = %.3f" % (report.map50, report.map50_95))

# %%
# Training-side quantities: the anchor alignment score and the loss terms.

print("alignment(0.5, 0.8; alpha=1, beta=6) =", alignment_score(0.5, 0.8, AlignmentParams(1.0, 6.0)))
pair = (Detection(BoundingBox(0, 0, 10, 10), "palm", 0.5), GroundTruth(BoundingBox(0, 0, 10, 30), "palm"))
print(composite_loss([pair]))
