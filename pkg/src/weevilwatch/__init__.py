"""weevilwatch: acoustic Red Palm Weevil screening, UAV palm detection
post-processing and infestation mapping."""

__version__ = "0.1.0"

from .classifier import ClassificationMetrics, ClassifierModel, SplitSpec, TrainParams
from .cqcc import CqccConfig, cqcc_features
from .detection import AlignmentParams, BoundingBox, Detection, GroundTruth, LetterboxTransform
from .geo import GeoPoint, PixelToGeoTransform, RpwMapDocument
from .ingest import AudioClip, DatasetManifest, SensorRecord, SensorRegistry

__all__ = [
    "AlignmentParams",
    "AudioClip",
    "BoundingBox",
    "ClassificationMetrics",
    "ClassifierModel",
    "CqccConfig",
    "DatasetManifest",
    "Detection",
    "GeoPoint",
    "GroundTruth",
    "LetterboxTransform",
    "PixelToGeoTransform",
    "RpwMapDocument",
    "SensorRecord",
    "SensorRegistry",
    "SplitSpec",
    "TrainParams",
    "cqcc_features",
]
