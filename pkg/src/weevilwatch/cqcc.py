"""Constant-Q cepstral coefficients.

The transform uses one analysis window of ``M`` samples for every bin and
evaluates bin ``k`` at normalised frequency ``k*Q/M``::

    X[n, k]    = sum_m x[n*hop + m] w[m] exp(-2j*pi*k*Q*m/M)
    X_log      = ln(1 + mu |X|)
    X_norm     = (X_log - mean_k) / max(std_k, epsilon)     per bin, over frames
    C          = DCT(X_norm)                                 per frame

Two cepstral modes exist.  ``standard`` applies an orthonormal DCT-II across
the frequency bins of each frame.  ``literal`` sums the cosine kernel over
the window index ``m`` as the formula is usually printed, which collapses
every coefficient above zero; it is kept for comparison only.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, InsufficientDataError, ValidationError

WINDOWS = ("hamming", "hann", "rectangular")
DCT_MODES = ("standard", "literal")

FEATURE_MAGIC = b"CQCC"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class CqccConfig:
    Q: float = 1.0
    M: int = 512
    hop: int = 256
    K: int = 96
    mu: float = 1000.0
    epsilon: float = 1e-8
    n_cepstra: int = 20
    window: str = "hamming"
    dct_mode: str = "standard"

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValidationError("; ".join(problems))

    def problems(self) -> list:
        p = []
        if not self.Q > 0:
            p.append("Q must be positive")
        for name in ("M", "hop", "K", "n_cepstra"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 1:
                p.append(f"{name} must be a positive integer")
        if self.hop > self.M:
            p.append("hop must not exceed M")
        if self.n_cepstra > self.K:
            p.append("n_cepstra must not exceed K")
        if self.M >= 1 and self.K * self.Q / self.M > 0.5:
            p.append("K*Q/M exceeds 0.5 (bins above Nyquist)")
        if not self.mu > 0:
            p.append("mu must be positive")
        if not self.epsilon >= 0:
            p.append("epsilon must be non-negative")
        if self.window not in WINDOWS:
            p.append(f"window must be one of {WINDOWS}")
        if self.dct_mode not in DCT_MODES:
            p.append(f"dct_mode must be one of {DCT_MODES}")
        return p

    def to_dict(self) -> dict:
        return asdict(self)

    def bin_frequency(self, k: int, sample_rate: float) -> float:
        """Centre frequency of bin ``k`` in Hz."""
        return k * self.Q / self.M * sample_rate


@dataclass(frozen=True)
class NormalizedSpectral:
    values: np.ndarray
    mean: np.ndarray
    std: np.ndarray


def make_window(M: int, kind: str = "hamming") -> np.ndarray:
    if M < 1:
        raise DomainError("window length must be at least 1")
    if kind == "rectangular":
        return np.ones(M)
    if M == 1:
        return np.ones(1)
    m = np.arange(M)
    phase = np.cos(2.0 * np.pi * m / (M - 1))
    if kind == "hamming":
        return 0.54 - 0.46 * phase
    if kind == "hann":
        return 0.5 - 0.5 * phase
    raise DomainError(f"unknown window {kind!r}")


def _samples(clip):
    return np.asarray(getattr(clip, "samples", clip), dtype=np.float64)


def frame_count(n_samples: int, M: int, hop: int) -> int:
    if n_samples < M:
        return 0
    return (n_samples - M) // hop + 1


def cqt_kernel(config: CqccConfig) -> np.ndarray:
    """``M x K`` matrix ``w[m] * exp(-2j*pi*k*Q*m/M)``."""
    m = np.arange(config.M)[:, None]
    k = np.arange(config.K)[None, :]
    w = make_window(config.M, config.window)[:, None]
    return w * np.exp(-2j * np.pi * k * config.Q * m / config.M)


def cqt(clip, config: CqccConfig) -> np.ndarray:
    """Frame-by-bin complex coefficients; frames are not padded at the end."""
    x = _samples(clip)
    if x.size < config.M:
        raise InsufficientDataError(f"clip has {x.size} samples, window needs {config.M}")
    frames = np.lib.stride_tricks.sliding_window_view(x, config.M)[::config.hop]
    return frames @ cqt_kernel(config)


def log_compress(X: np.ndarray, mu: float) -> np.ndarray:
    if not mu > 0:
        raise DomainError("mu must be positive")
    return np.log1p(mu * np.abs(X))


def power_normalize(X_log: np.ndarray, epsilon: float = 1e-8) -> NormalizedSpectral:
    """Standardise each bin over frames (population std, floored at epsilon)."""
    X_log = np.asarray(X_log, dtype=np.float64)
    if X_log.ndim != 2 or X_log.shape[0] < 1:
        raise DomainError("need a 2-D matrix with at least one frame")
    mean = X_log.mean(axis=0)
    std = X_log.std(axis=0)
    centred = X_log - mean
    denom = np.maximum(std, epsilon)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(denom > 0, centred / np.where(denom > 0, denom, 1.0), 0.0)
    return NormalizedSpectral(values, mean, std)


def dct_matrix(K: int) -> np.ndarray:
    """Orthonormal DCT-II basis; row ``j`` holds coefficient ``j``."""
    j = np.arange(K)[:, None]
    i = np.arange(K)[None, :]
    D = np.cos(np.pi * j * (2 * i + 1) / (2 * K)) * math.sqrt(2.0 / K)
    D[0] /= math.sqrt(2.0)
    return D


def literal_cosine_sums(M: int, n: int) -> np.ndarray:
    """``sum_m cos(pi*k*(m + 0.5)/M)`` for ``k = 0 .. n-1``."""
    m = np.arange(M)[None, :]
    k = np.arange(n)[:, None]
    return np.cos(np.pi * k * (m + 0.5) / M).sum(axis=1)


def cepstra(X_norm, config: CqccConfig) -> np.ndarray:
    values = X_norm.values if isinstance(X_norm, NormalizedSpectral) else np.asarray(X_norm, float)
    K = values.shape[1]
    nc = config.n_cepstra
    if nc > K:
        raise DomainError(f"n_cepstra={nc} exceeds the {K} available bins")
    if config.dct_mode == "literal":
        return values[:, :nc] * literal_cosine_sums(config.M, nc)[None, :]
    if config.dct_mode == "standard":
        return values @ dct_matrix(K)[:nc].T
    raise DomainError(f"unknown dct_mode {config.dct_mode!r}")


def normalized_spectrum(clip, config: CqccConfig) -> NormalizedSpectral:
    """Everything before the cepstral stage."""
    return power_normalize(log_compress(cqt(clip, config), config.mu), config.epsilon)


def cqcc_features(clip, config: CqccConfig = CqccConfig()) -> np.ndarray:
    """``frames x n_cepstra`` CQCC matrix of a clip."""
    return cepstra(normalized_spectrum(clip, config), config)


def features_to_image(features: np.ndarray, width: int, height: int) -> np.ndarray:
    """Min-max scale to 8-bit grey and nearest-neighbour resize.

    Matrix rows (frames) run down the image, coefficients run across.
    """
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.size == 0:
        raise DomainError("features must be a non-empty 2-D matrix")
    if width < 1 or height < 1:
        raise DomainError("image size must be positive")
    lo, hi = F.min(), F.max()
    if hi > lo:
        scaled = np.round((F - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.full(F.shape, 128.0)
    rows = np.minimum(((np.arange(height) + 0.5) * F.shape[0] / height).astype(int), F.shape[0] - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * F.shape[1] / width).astype(int), F.shape[1] - 1)
    return scaled[np.ix_(rows, cols)].astype(np.uint8)


def write_image(image: np.ndarray, path) -> None:
    """Write an 8-bit grey raster; ``.pgm`` is written directly, anything else via Pillow."""
    path = Path(path)
    image = np.asarray(image, dtype=np.uint8)
    if path.suffix.lower() == ".pgm":
        h, w = image.shape
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())
        return
    from PIL import Image

    Image.fromarray(image, mode="L").save(path)


# --------------------------------------------------------------------------
# feature files
# --------------------------------------------------------------------------

def dump_features(features: np.ndarray) -> bytes:
    """16-byte header (magic, version, rows, cols) + little-endian float64 rows."""
    F = np.ascontiguousarray(features, dtype="<f8")
    if F.ndim != 2:
        raise DomainError("features must be 2-D")
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, F.shape[0], F.shape[1])
    return header + F.tobytes()


def parse_features(data: bytes) -> np.ndarray:
    if len(data) < 16 or data[:4] != FEATURE_MAGIC:
        raise FormatError("not a CQCC feature file")
    version, n, c = struct.unpack("<III", data[4:16])
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}")
    if len(data) != 16 + 8 * n * c:
        raise FormatError("feature payload size does not match header")
    return np.frombuffer(data[16:], dtype="<f8").reshape(n, c).astype(np.float64)


def save_features(features, path) -> None:
    Path(path).write_bytes(dump_features(features))


def load_features(path) -> np.ndarray:
    return parse_features(Path(path).read_bytes())


def export_features_csv(features, path) -> None:
    F = np.asarray(features, dtype=np.float64)
    header = ",".join(f"c{j}" for j in range(F.shape[1]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in F:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
