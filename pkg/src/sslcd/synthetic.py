"""Procedural multitemporal scenes with known change masks.

Each band of a scene is its own smooth value-noise field plus a weaker fine
texture, so every location has a distinctive multiband signature.
The second acquisition applies a per-band gain/bias (acquisition conditions)
and overwrites some rectangular or elliptical blobs with a new material (the
changes). Both acquisitions then get independent sensor noise. The default
noise is strong relative to the texture, so telling change from noise needs
spatial context rather than single pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .raster import RasterPair
from .seeding import child_seed


@dataclass(frozen=True)
class SyntheticSceneSpec:
    size: tuple[int, int] = (600, 600)
    bands: int = 13
    texture_scale: float = 48.0
    gain_range: tuple[float, float] = (0.8, 1.2)
    bias_range: tuple[float, float] = (-0.1, 0.1)
    noise_std: float = 0.2
    n_blobs: int = 6
    blob_size_range: tuple[int, int] = (20, 60)
    change_value_range: tuple[float, float] = (0.65, 1.0)
    fine_texture: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        h, w = self.size
        lo, hi = self.blob_size_range
        if h <= 0 or w <= 0 or self.bands <= 0:
            raise ConfigError("scene size and band count must be positive")
        if self.texture_scale <= 0 or self.noise_std < 0:
            raise ConfigError("texture_scale must be > 0 and noise_std >= 0")
        if self.n_blobs < 0 or lo <= 0 or hi < lo:
            raise ConfigError(f"invalid change budget: {self.n_blobs} blobs of size {self.blob_size_range}")
        if self.n_blobs and (hi > h or hi > w):
            raise ConfigError(f"blob size {hi} does not fit a {h}x{w} scene")
        if self.n_blobs * hi * hi > h * w:
            raise ConfigError(f"change budget of {self.n_blobs} blobs up to {hi}px exceeds the image area")
        if self.fine_texture < 0:
            raise ConfigError("fine_texture must be >= 0")
        if self.gain_range[0] > self.gain_range[1] or self.bias_range[0] > self.bias_range[1]:
            raise ConfigError("radiometric ranges must be (low, high)")


def value_noise(shape: tuple[int, int], scale: float, rng: np.random.Generator, octaves: int = 3) -> np.ndarray:
    """Fractal value noise in roughly [0, 1]; cubic upsampling of random lattices."""
    h, w = shape
    total = np.zeros(shape)
    weight = 0.0
    amp = 1.0
    for octave in range(octaves):
        s = max(scale / 2**octave, 1.0)
        lattice = rng.random((int(np.ceil(h / s)) + 3, int(np.ceil(w / s)) + 3))
        up = ndimage.zoom(lattice, s, order=3, mode="nearest", grid_mode=True)
        off = int(round(s))
        total += amp * up[off : off + h, off : off + w]
        weight += amp
        amp *= 0.5
    return np.clip(total / weight, 0.0, 1.0)


def _blob_mask(shape, rng: np.random.Generator, size_range) -> np.ndarray:
    h, w = shape
    bh = int(rng.integers(size_range[0], size_range[1] + 1))
    bw = int(rng.integers(size_range[0], size_range[1] + 1))
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    mask = np.zeros(shape, dtype=bool)
    if rng.random() < 0.5:
        mask[top : top + bh, left : left + bw] = True
    else:
        yy, xx = np.mgrid[0:bh, 0:bw]
        cy, cx = (bh - 1) / 2, (bw - 1) / 2
        inside = ((yy - cy) / (bh / 2)) ** 2 + ((xx - cx) / (bw / 2)) ** 2 <= 1.0
        mask[top : top + bh, left : left + bw] = inside
    return mask


def generate_synthetic_pair(spec: SyntheticSceneSpec, pair_id: str = "synthetic") -> RasterPair:
    """Return a labelled :class:`RasterPair`; a pure function of ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    b = spec.bands

    smooth = np.stack([value_noise((h, w), spec.texture_scale, rng) for _ in range(b)])
    fine = np.stack([value_noise((h, w), 3.0, rng, octaves=1) for _ in range(b)])
    band_offset = rng.uniform(0.02, 0.1, size=b)
    t1 = band_offset[:, None, None] + smooth + spec.fine_texture * (fine - 0.5)

    t2 = t1.copy()
    labels = np.zeros((h, w), dtype=bool)
    for _ in range(spec.n_blobs):
        mask = _blob_mask((h, w), rng, spec.blob_size_range)
        material = rng.uniform(*spec.change_value_range, size=b)
        texture = value_noise((h, w), 4.0, rng, octaves=1)
        t2[:, mask] = material[:, None] + 0.05 * (texture[mask][None] - 0.5)
        labels |= mask

    gain = rng.uniform(*spec.gain_range, size=b)
    dyn = t1.max(axis=(1, 2)) - t1.min(axis=(1, 2))
    bias = rng.uniform(*spec.bias_range, size=b) * dyn
    t2 = gain[:, None, None] * t2 + bias[:, None, None]
    if spec.noise_std > 0:
        t1 = t1 + rng.normal(0.0, spec.noise_std, size=t1.shape)
        t2 = t2 + rng.normal(0.0, spec.noise_std, size=t2.shape)

    return RasterPair(pair_id, t1.astype(np.float32), t2.astype(np.float32), labels[None].astype(np.float32))


def generate_benchmark(count: int, template: SyntheticSceneSpec, seed: int, prefix: str = "pair") -> list[RasterPair]:
    """``count`` independent scenes sharing ``template`` except for their seeds."""
    pairs = []
    for i in range(count):
        pair_id = f"{prefix}_{i:04d}"
        spec = SyntheticSceneSpec(**{**template.__dict__, "seed": child_seed(seed, pair_id)})
        pairs.append(generate_synthetic_pair(spec, pair_id))
    return pairs
