"""Raster tensor files, image-pair containers and dataset manifests.

File layout of a raster tensor::

    {"shape":[C,H,W],"dtype":"f32","order":"CHW"}\\n
    <C*H*W little-endian float32 values, row-major>

The header is compact JSON on one line; nothing else precedes the payload.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError

SPLITS = ("train", "val", "test")
_LE_F32 = np.dtype("<f4")


def _header_bytes(shape: Iterable[int], order: str) -> bytes:
    header = {"shape": [int(s) for s in shape], "dtype": "f32", "order": order}
    return json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n"


def encode_raster(array, order: str = "CHW") -> bytes:
    a = np.asarray(array)
    if not np.all(np.isfinite(a)):
        raise DataError("refusing to write non-finite raster data")
    return _header_bytes(a.shape, order) + np.ascontiguousarray(a, dtype=_LE_F32).tobytes()


def write_raster(array, path, order: str = "CHW") -> None:
    """Write an array (or :class:`~sslcd.tensor.Tensor`) as a raster tensor file."""
    data = getattr(array, "data", array)
    Path(path).write_bytes(encode_raster(data, order))


def decode_raster(blob: bytes) -> np.ndarray:
    newline = blob.find(b"\n")
    if newline < 0:
        raise DataError("raster header is not newline-terminated")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable raster header: {exc}") from None
    if not isinstance(header, dict) or "shape" not in header:
        raise DataError("raster header lacks a shape")
    if header.get("dtype") != "f32":
        raise DataError(f"unsupported raster dtype {header.get('dtype')!r}")
    shape = header["shape"]
    if not isinstance(shape, list) or not all(isinstance(s, int) and s > 0 for s in shape):
        raise DataError(f"invalid raster shape {shape!r}")
    payload = blob[newline + 1 :]
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(payload) != expected:
        raise DataError(f"raster payload has {len(payload)} bytes, shape {shape} needs {expected}")
    return np.frombuffer(payload, dtype=_LE_F32).astype(np.float32).reshape(shape)


def read_raster(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read raster {path}: {exc}") from None
    return decode_raster(blob)


@dataclass
class RasterPair:
    """A co-registered image pair, optionally with a dense change mask.

    ``labels`` uses 1 for changed pixels and 0 for unchanged ones.
    """

    id: str
    t1: np.ndarray
    t2: np.ndarray
    labels: np.ndarray | None = None
    normalization: dict | None = None

    def __post_init__(self):
        self.t1 = np.asarray(self.t1, dtype=np.float32)
        self.t2 = np.asarray(self.t2, dtype=np.float32)
        if self.t1.ndim != 3 or self.t1.shape != self.t2.shape:
            raise DataError(f"pair {self.id}: t1 {self.t1.shape} and t2 {self.t2.shape} must be equal [B,H,W]")
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.float32)
            if lab.ndim == 2:
                lab = lab[None]
            if lab.shape != (1,) + self.t1.shape[1:]:
                raise DataError(f"pair {self.id}: labels {lab.shape} do not match image {self.t1.shape}")
            if not np.all((lab == 0) | (lab == 1)):
                raise DataError(f"pair {self.id}: labels must be 0/1")
            self.labels = lab

    @property
    def bands(self) -> int:
        return self.t1.shape[0]

    @property
    def hw(self) -> tuple[int, int]:
        return self.t1.shape[1], self.t1.shape[2]

    def image(self, time_index: int) -> np.ndarray:
        if time_index not in (1, 2):
            raise ValueError("time index must be 1 or 2")
        return self.t1 if time_index == 1 else self.t2


def _standardize(image: np.ndarray, pair_id: str, which: str):
    x = image.astype(np.float64)
    mean = x.mean(axis=(1, 2))
    std = x.std(axis=(1, 2))
    flat = std == 0
    if np.any(flat):
        warnings.warn(
            f"pair {pair_id} {which}: zero-variance band(s) {np.flatnonzero(flat).tolist()}, using std=1",
            RuntimeWarning,
            stacklevel=3,
        )
        std = np.where(flat, 1.0, std)
    out = (x - mean[:, None, None]) / std[:, None, None]
    return out.astype(np.float32), mean.tolist(), std.tolist()


def normalize_pair(pair: RasterPair) -> RasterPair:
    """Standardise every band of each image to zero mean and unit variance."""
    t1, m1, s1 = _standardize(pair.t1, pair.id, "t1")
    t2, m2, s2 = _standardize(pair.t2, pair.id, "t2")
    stats = {"t1": {"mean": m1, "std": s1}, "t2": {"mean": m2, "std": s2}}
    return replace(pair, t1=t1, t2=t2, normalization=stats)


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    id: str
    path_t1: str
    path_t2: str
    split: str
    path_labels: str | None = None

    def to_json(self) -> dict:
        d = {"id": self.id, "path_t1": self.path_t1, "path_t2": self.path_t2, "split": self.split}
        if self.path_labels is not None:
            d["path_labels"] = self.path_labels
        return d


@dataclass
class DatasetManifest:
    band_count: int
    entries: list[ManifestEntry]
    metadata: dict = field(default_factory=dict)
    root: Path = field(default=Path("."), repr=False)

    def by_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def entry(self, pair_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == pair_id:
                return e
        raise DataError(f"pair id {pair_id!r} not in manifest")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def validate(self, check_files: bool = True) -> None:
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest contains duplicate pair ids")
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"entry {e.id}: unknown split {e.split!r}")
            if check_files:
                for rel in (e.path_t1, e.path_t2, e.path_labels):
                    if rel is not None and not self.resolve(rel).is_file():
                        raise DataError(f"entry {e.id}: missing file {rel}")

    def load_pair(self, pair_id_or_entry, normalize: bool = True) -> RasterPair:
        e = pair_id_or_entry if isinstance(pair_id_or_entry, ManifestEntry) else self.entry(pair_id_or_entry)
        t1 = read_raster(self.resolve(e.path_t1))
        t2 = read_raster(self.resolve(e.path_t2))
        if t1.shape[0] != self.band_count:
            raise DataError(f"pair {e.id}: {t1.shape[0]} bands, manifest says {self.band_count}")
        labels = read_raster(self.resolve(e.path_labels)) if e.path_labels else None
        pair = RasterPair(e.id, t1, t2, labels)
        return normalize_pair(pair) if normalize else pair

    def load_split(self, split: str, normalize: bool = True) -> list[RasterPair]:
        return [self.load_pair(e, normalize) for e in self.by_split(split)]

    def to_json(self) -> dict:
        return {
            "band_count": self.band_count,
            "entries": [e.to_json() for e in self.entries],
            "metadata": self.metadata,
        }

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        entries = [
            ManifestEntry(
                id=str(e["id"]),
                path_t1=e["path_t1"],
                path_t2=e["path_t2"],
                split=e["split"],
                path_labels=e.get("path_labels"),
            )
            for e in raw["entries"]
        ]
        manifest = DatasetManifest(int(raw["band_count"]), entries, raw.get("metadata", {}), path.parent)
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed manifest {path}: {exc!r}") from None
    manifest.validate(check_files)
    return manifest


def split_counts(n: int, fractions=(0.85, 0.10)) -> tuple[int, int, int]:
    """Train/val/test sizes for ``n`` pairs; test takes the remainder."""
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def write_dataset(pairs: list[RasterPair], out_dir, splits: list[str], metadata: dict | None = None) -> DatasetManifest:
    """Write ``pairs`` under ``out_dir`` plus a ``manifest.json`` referencing them."""
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    if len(splits) != len(pairs):
        raise ValueError("one split label per pair required")
    entries = []
    for pair, split in zip(pairs, splits):
        write_raster(pair.t1, out / f"{pair.id}_t1.raw")
        write_raster(pair.t2, out / f"{pair.id}_t2.raw")
        labels = None
        if pair.labels is not None:
            labels = f"{pair.id}_labels.raw"
            write_raster(pair.labels, out / labels)
        entries.append(ManifestEntry(pair.id, f"{pair.id}_t1.raw", f"{pair.id}_t2.raw", split, labels))
    manifest = DatasetManifest(pairs[0].bands if pairs else 0, entries, metadata or {}, out)
    manifest.save(out / "manifest.json")
    return manifest
