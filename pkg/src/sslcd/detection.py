"""Binary change maps from per-pixel features.

Two routes:

* change-vector analysis: magnitude of the feature difference, min-max
  normalised, thresholded by Otsu or the triangle method on a 256-bin
  histogram;
* a linear softmax classifier on signed feature differences, thresholded at
  the value that maximised F1 on its training pixels.

Histogram bins are left-open, ``(i/256, (i+1)/256]`` with 0 folded into bin 0,
so "bin index >= k" is exactly "normalised score > k/256". A threshold
result therefore always reproduces its binary map as ``score > threshold``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DegenerateInputError
from .models import difference_features
from .raster import RasterPair

N_BINS = 256


@dataclass
class ChangeMagnitudeMap:
    rho: np.ndarray
    layer: int | None = None
    normalization: dict = field(default_factory=dict)


@dataclass
class ThresholdResult:
    threshold: float
    method: str
    histogram: np.ndarray
    range: tuple[float, float]
    bin: int | None = None


@dataclass
class ChangeMap:
    binary: np.ndarray  # uint8 [1, H, W]
    score: np.ndarray  # [H, W], the map ``binary`` was thresholded from
    classifier: str
    threshold: float
    note: str = ""


def cva_magnitude(f1, f2, layer: int | None = None) -> ChangeMagnitudeMap:
    """Per-pixel Euclidean norm of ``f1 - f2`` over channels."""
    f1 = np.asarray(getattr(f1, "data", f1), dtype=np.float64)
    f2 = np.asarray(getattr(f2, "data", f2), dtype=np.float64)
    if f1.shape != f2.shape or f1.ndim != 3:
        raise ValueError(f"feature maps must be equal [C,H,W], got {f1.shape} and {f2.shape}")
    rho = np.sqrt(np.sum((f1 - f2) ** 2, axis=0))
    return ChangeMagnitudeMap(rho, layer, {"min": float(rho.min()), "max": float(rho.max())})


def normalize_scores(scores) -> tuple[np.ndarray, float, float]:
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    if not hi > lo:
        raise DegenerateInputError("score map is constant; no threshold can split it")
    return (s - lo) / (hi - lo), lo, hi


def bin_index(normalized: np.ndarray) -> np.ndarray:
    return np.clip(np.ceil(normalized * N_BINS).astype(np.int64) - 1, 0, N_BINS - 1)


def score_histogram(scores) -> tuple[np.ndarray, np.ndarray, float, float]:
    norm, lo, hi = normalize_scores(scores)
    hist = np.bincount(bin_index(norm).ravel(), minlength=N_BINS)
    return hist, norm, lo, hi


def otsu_bin(hist: np.ndarray) -> int:
    """Split index ``k`` in 1..255 (classes: bins < k, bins >= k) maximising between-class variance."""
    hist = np.asarray(hist, dtype=np.float64)
    p = hist / hist.sum()
    levels = np.arange(hist.size, dtype=np.float64)
    w0 = np.cumsum(p)[:-1]
    m0 = np.cumsum(p * levels)[:-1]
    mt = float(np.sum(p * levels))
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.where(valid, m0 / np.where(valid, w0, 1), 0.0)
    mu1 = np.where(valid, (mt - m0) / np.where(valid, w1, 1), 0.0)
    between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, 0.0)
    return int(np.argmax(between)) + 1


def triangle_bin(hist: np.ndarray) -> tuple[int, str]:
    """Bin farthest below the peak-to-tail line, and which side the tail is on.

    The tail is the side of the peak with the longer nonzero support (right
    on ties). The line runs from the peak to the first empty bin past the
    support, or to the last bin if the support reaches the histogram edge.
    Ties in distance go toward the tail.
    """
    h = np.asarray(hist, dtype=np.float64)
    nz = np.flatnonzero(h)
    peak = int(np.argmax(h))
    right = (nz[-1] - peak) >= (peak - nz[0])
    if not right:
        b, _ = triangle_bin(h[::-1])
        return h.size - 1 - b, "left"
    end = min(int(nz[-1]) + 1, h.size - 1)
    x = np.arange(peak, end + 1, dtype=np.float64)
    dx, dy = end - peak, h[end] - h[peak]
    # signed area; positive when the histogram lies below the line
    below = dy * (x - peak) - dx * (h[peak : end + 1] - h[peak])
    best = below.max()
    return peak + int(np.flatnonzero(below == best)[-1]), "right"


def otsu_threshold(scores) -> ThresholdResult:
    hist, _, lo, hi = score_histogram(scores)
    k = otsu_bin(hist)
    return ThresholdResult(k / N_BINS, "otsu", hist, (lo, hi), k)


def triangle_threshold(scores) -> ThresholdResult:
    """Right tail: changed = bins beyond the selected bin. Left tail: the selected bin and above."""
    hist, _, lo, hi = score_histogram(scores)
    b, side = triangle_bin(hist)
    k = b + 1 if side == "right" else b
    return ThresholdResult(k / N_BINS, "triangle", hist, (lo, hi), b)


def f1_tuned_threshold(scores, labels) -> ThresholdResult:
    """Best-F1 threshold among 256 evenly spaced values over the score range.

    Ties go to the lowest threshold. Decisions are ``score > threshold``.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in size")
    if not y.any():
        raise DataError("F1 tuning needs at least one changed pixel")
    candidates = np.linspace(s.min(), s.max(), N_BINS)
    order = np.sort(s)
    pos = np.sort(s[y])
    above = s.size - np.searchsorted(order, candidates, side="right")
    tp = pos.size - np.searchsorted(pos, candidates, side="right")
    fp = above - tp
    fn = pos.size - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(tp > 0, 2 * tp / np.maximum(denom, 1), -1.0)
    i = int(np.argmax(f1))
    hist = np.histogram(s, bins=N_BINS, range=(s.min(), s.max()) if s.max() > s.min() else None)[0]
    return ThresholdResult(float(candidates[i]), "f1-tuned", hist, (float(s.min()), float(s.max())), i)


def apply_threshold(score: np.ndarray, threshold: float) -> np.ndarray:
    return (np.asarray(score) > threshold).astype(np.uint8)[None]


def detect_cva(pair: RasterPair, model, layer: int, method: str = "triangle") -> ChangeMap:
    """CVA on ``layer`` features of both dates; the threshold is chosen per pair.

    A pair with identical features everywhere is reported as a no-change
    scene (all-zero map, infinite threshold) instead of raising.
    """
    if method not in ("otsu", "triangle"):
        raise ValueError(f"unknown CVA threshold method {method!r}")
    diff = difference_features(model, pair.t1, pair.t2, layer)
    mag = cva_magnitude(diff, np.zeros_like(diff), layer)
    tag = f"cva-{method}"
    try:
        norm, _, _ = normalize_scores(mag.rho)
    except DegenerateInputError:
        return ChangeMap(np.zeros((1,) + mag.rho.shape, np.uint8), np.zeros_like(mag.rho), tag, float("inf"), "no-change scene")
    result = otsu_threshold(mag.rho) if method == "otsu" else triangle_threshold(mag.rho)
    return ChangeMap(apply_threshold(norm, result.threshold), norm, tag, result.threshold)


def detect_linear(pair: RasterPair, model, layer: int, classifier, threshold: ThresholdResult | float) -> ChangeMap:
    diff = difference_features(model, pair.t1, pair.t2, layer)
    c, h, w = diff.shape
    if c != classifier.in_features:
        raise ValueError(f"layer {layer} yields {c} features, classifier expects {classifier.in_features}")
    prob = classifier.predict_proba(diff.reshape(c, -1).T).reshape(h, w)
    t = float(getattr(threshold, "threshold", threshold))
    return ChangeMap(apply_threshold(prob, t), prob, "linear", t)


# ---------------------------------------------------------------- netpbm I/O


def encode_pgm(binary: np.ndarray) -> bytes:
    b = np.asarray(binary)
    if b.ndim == 3:
        b = b[0]
    h, w = b.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + (b.astype(bool).astype(np.uint8) * 255).tobytes()


def write_pgm(binary: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_pgm(binary))


def _parse_netpbm(blob: bytes, magic: bytes) -> tuple[int, int, bytes]:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated netpbm header")
        tokens.append(blob[start:pos])
    if tokens[0] != magic:
        raise DataError(f"expected {magic.decode()} image, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError("only 8-bit netpbm images are supported")
    return w, h, blob[pos + 1 :]


def read_pgm(path) -> np.ndarray:
    """Binary map ``[1,H,W]`` in {0,1} from an 8-bit P5 file (nonzero = changed)."""
    w, h, payload = _parse_netpbm(Path(path).read_bytes(), b"P5")
    if len(payload) != w * h:
        raise DataError(f"P5 payload has {len(payload)} bytes, expected {w * h}")
    return (np.frombuffer(payload, np.uint8).reshape(1, h, w) > 0).astype(np.uint8)


FIG_COLORS = {
    "tp": (255, 255, 255),
    "fn": (0, 255, 0),
    "fp": (255, 0, 255),
    "tn": (0, 0, 0),
}


def render_comparison(pred, truth) -> np.ndarray:
    """RGB image: hits white, missed changes green, false alarms magenta, rest black."""
    p = np.asarray(pred).reshape(np.asarray(pred).shape[-2:]).astype(bool)
    t = np.asarray(truth).reshape(np.asarray(truth).shape[-2:]).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    rgb = np.zeros(p.shape + (3,), np.uint8)
    rgb[p & t] = FIG_COLORS["tp"]
    rgb[~p & t] = FIG_COLORS["fn"]
    rgb[p & ~t] = FIG_COLORS["fp"]
    return rgb


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, np.uint8).tobytes()


def write_ppm(rgb: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_ppm(rgb))
