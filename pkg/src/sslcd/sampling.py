"""Patch pairs, triplets and labelled crops for pretext and downstream training.

Pseudo labels for pretext task 1 are 0 for spatially overlapping patches and
1 for disjoint ones. Each patch independently comes from time 1 or time 2.
Overlapping partners are offset by at most half a patch along each axis, so
they share at least a quarter of their area.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError
from .raster import RasterPair

MAX_TRIES = 1000


@dataclass(frozen=True)
class SamplerConfig:
    patch_size: int = 64
    pairs_per_image: int = 5
    seed: int = 0
    augmentation_enabled: bool = True


@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    size: int

    def intersection(self, other: "Rect") -> int:
        dy = min(self.top + self.size, other.top + other.size) - max(self.top, other.top)
        dx = min(self.left + self.size, other.left + other.size) - max(self.left, other.left)
        return max(dy, 0) * max(dx, 0)

    def crop(self, image: np.ndarray) -> np.ndarray:
        return image[..., self.top : self.top + self.size, self.left : self.left + self.size].copy()


@dataclass
class PatchExample:
    patches: list[np.ndarray]
    rects: list[Rect]
    times: list[int]
    source_pair_id: str
    pseudo_label: int | None = None
    label_mask: np.ndarray | None = None
    transform: int = 0


def _check_size(pair: RasterPair, p: int) -> tuple[int, int]:
    h, w = pair.hw
    if p <= 0 or 2 * p > min(h, w):
        raise ConfigError(f"patch size {p} needs an image of at least {2 * p}px per side, got {h}x{w}")
    return h, w


def random_rect(h: int, w: int, p: int, rng: np.random.Generator) -> Rect:
    return Rect(int(rng.integers(0, h - p + 1)), int(rng.integers(0, w - p + 1)), p)


def overlapping_rect(anchor: Rect, h: int, w: int, rng: np.random.Generator) -> Rect:
    p = anchor.size
    half = p // 2
    for _ in range(MAX_TRIES):
        dy, dx = (int(v) for v in rng.integers(-half, half + 1, size=2))
        top, left = anchor.top + dy, anchor.left + dx
        if 0 <= top <= h - p and 0 <= left <= w - p:
            return Rect(top, left, p)
    raise RuntimeError("could not place an overlapping patch inside the image")


def _clear_starts(start: int, p: int, n: int) -> np.ndarray:
    # start offsets along one axis whose span misses [start, start + p)
    idx = np.arange(n - p + 1)
    return idx[(idx + p <= start) | (idx >= start + p)]


def has_disjoint_partner(anchor: Rect, h: int, w: int) -> bool:
    p = anchor.size
    return _clear_starts(anchor.top, p, h).size > 0 or _clear_starts(anchor.left, p, w).size > 0


def disjoint_rect(anchor: Rect, h: int, w: int, rng: np.random.Generator) -> Rect:
    p = anchor.size
    rows, cols = _clear_starts(anchor.top, p, h), _clear_starts(anchor.left, p, w)
    if rows.size == 0 and cols.size == 0:
        raise ValueError(f"no {p}px patch in a {h}x{w} image avoids {anchor}")
    for _ in range(MAX_TRIES):
        r = random_rect(h, w, p, rng)
        if anchor.intersection(r) == 0:
            return r
    # Rejection rarely fails. When it does, draw uniformly over the disjoint
    # positions: rows in `rows` with any column, then the remaining rows with
    # columns in `cols`.
    n_rows, n_cols = h - p + 1, w - p + 1
    other_rows = np.setdiff1d(np.arange(n_rows), rows)
    k = int(rng.integers(0, rows.size * n_cols + other_rows.size * cols.size))
    if k < rows.size * n_cols:
        return Rect(int(rows[k // n_cols]), k % n_cols, p)
    k -= rows.size * n_cols
    return Rect(int(other_rows[k // cols.size]), int(cols[k % cols.size]), p)


def _anchor(h: int, w: int, p: int, rng: np.random.Generator) -> Rect:
    """Uniform anchor among those that admit a disjoint partner.

    Any image at least 2p on a side has such anchors, for example at a corner.
    """
    while True:
        r = random_rect(h, w, p, rng)
        if has_disjoint_partner(r, h, w):
            return r


def _times(rng, n):
    return [int(t) for t in rng.integers(1, 3, size=n)]


def sample_pair(pair: RasterPair, cfg: SamplerConfig, label: int, rng: np.random.Generator) -> PatchExample:
    if label not in (0, 1):
        raise ValueError("pseudo label must be 0 (overlapping) or 1 (disjoint)")
    h, w = _check_size(pair, cfg.patch_size)
    r1 = _anchor(h, w, cfg.patch_size, rng)
    r2 = overlapping_rect(r1, h, w, rng) if label == 0 else disjoint_rect(r1, h, w, rng)
    times = _times(rng, 2)
    patches = [r.crop(pair.image(t)) for r, t in zip((r1, r2), times)]
    return PatchExample(patches, [r1, r2], times, pair.id, pseudo_label=label)


def sample_triplet(pair: RasterPair, cfg: SamplerConfig, rng: np.random.Generator) -> PatchExample:
    h, w = _check_size(pair, cfg.patch_size)
    r1 = _anchor(h, w, cfg.patch_size, rng)
    r2 = overlapping_rect(r1, h, w, rng)
    r3 = disjoint_rect(r1, h, w, rng)
    times = _times(rng, 3)
    patches = [r.crop(pair.image(t)) for r, t in zip((r1, r2, r3), times)]
    return PatchExample(patches, [r1, r2, r3], times, pair.id)


def sample_labeled_patches(pair: RasterPair, count: int, patch_size: int, rng: np.random.Generator) -> list[PatchExample]:
    """Co-located crops of both dates plus the matching change-mask crop."""
    if pair.labels is None:
        raise DataError(f"pair {pair.id} has no change labels")
    h, w = pair.hw
    if patch_size > min(h, w):
        raise ConfigError(f"patch size {patch_size} exceeds image {h}x{w}")
    out = []
    for _ in range(count):
        r = random_rect(h, w, patch_size, rng)
        out.append(PatchExample([r.crop(pair.t1), r.crop(pair.t2)], [r, r], [1, 2], pair.id, label_mask=r.crop(pair.labels)))
    return out


# ---------------------------------------------------------------- augmentation

D4_SIZE = 8


def apply_d4(a: np.ndarray, element: int) -> np.ndarray:
    """Element ``e`` of the dihedral group: rotate by ``e % 4`` quarter turns, then flip if ``e >= 4``."""
    out = np.rot90(a, element % 4, axes=(-2, -1))
    if element >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def invert_d4(a: np.ndarray, element: int) -> np.ndarray:
    out = a[..., ::-1] if element >= 4 else a
    return np.ascontiguousarray(np.rot90(out, -(element % 4), axes=(-2, -1)))


def augment(example: PatchExample, rng: np.random.Generator) -> PatchExample:
    """Apply one random D4 transform jointly to every patch (and mask) of ``example``."""
    element = int(rng.integers(0, D4_SIZE))
    mask = None if example.label_mask is None else apply_d4(example.label_mask, element)
    return replace(example, patches=[apply_d4(p, element) for p in example.patches], label_mask=mask, transform=element)


# ---------------------------------------------------------------- epochs


def _epoch_sources(n_images: int, per_image: int, rng: np.random.Generator, even: bool) -> np.ndarray:
    sources = np.repeat(np.arange(n_images), per_image)
    if even and sources.size % 2:
        sources = np.append(sources, rng.integers(0, n_images))
    return sources[rng.permutation(sources.size)]


def overlap_epoch(pairs: list[RasterPair], cfg: SamplerConfig, rng: np.random.Generator) -> list[PatchExample]:
    """One epoch of task-1 examples: ``pairs_per_image`` per image, exactly half of each label.

    An odd total is padded with one extra example from a random image.
    """
    if not pairs:
        raise DataError("no image pairs to sample from")
    sources = _epoch_sources(len(pairs), cfg.pairs_per_image, rng, even=True)
    labels = np.zeros(sources.size, dtype=int)
    labels[sources.size // 2 :] = 1
    labels = labels[rng.permutation(labels.size)]
    out = []
    for src, lab in zip(sources, labels):
        ex = sample_pair(pairs[src], cfg, int(lab), rng)
        out.append(augment(ex, rng) if cfg.augmentation_enabled else ex)
    return out


def triplet_epoch(pairs: list[RasterPair], cfg: SamplerConfig, rng: np.random.Generator) -> list[PatchExample]:
    if not pairs:
        raise DataError("no image pairs to sample from")
    out = []
    for src in _epoch_sources(len(pairs), cfg.pairs_per_image, rng, even=False):
        ex = sample_triplet(pairs[src], cfg, rng)
        out.append(augment(ex, rng) if cfg.augmentation_enabled else ex)
    return out


def stack_batch(examples: list[PatchExample]) -> tuple[list[np.ndarray], np.ndarray | None]:
    """Stack patch slots across examples: returns ``[slot0 [N,B,P,P], slot1, ...]`` and labels."""
    slots = [np.stack([ex.patches[i] for ex in examples]) for i in range(len(examples[0].patches))]
    if examples[0].pseudo_label is None:
        return slots, None
    return slots, np.array([ex.pseudo_label for ex in examples], dtype=np.float64)
