"""Synthetic scenes, reduced-resolution degradation, and planar tensor I/O.

Scenes mix smooth gradients, hard-edged shapes, and band-correlated textures
so there is real spatial detail to inject. Degradation follows the standard
reduced-resolution protocol: the ground truth is blurred and decimated to get
the low-resolution multispectral input, and the panchromatic input is a
weighted band average of the ground truth.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import convolve1d

__all__ = [
    "FormatError",
    "SceneSpec",
    "Triplet",
    "generate_scenes",
    "gaussian_kernel",
    "blur_decimate",
    "wald_degrade",
    "degrade_pan",
    "write_image",
    "read_image",
    "write_pgm",
    "triplet_paths",
    "write_triplet",
    "read_triplet",
    "load_split",
]

MAGIC = b"S2WT"


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a reproducible batch of ground-truth scenes in [0, 1]."""

    c: int = 8
    size: int = 64
    count: int = 64
    seed: int = 0


@dataclass
class Triplet:
    gt: np.ndarray
    lrms: np.ndarray
    pan: np.ndarray

    def __post_init__(self):
        if self.gt.ndim != 3 or self.lrms.ndim != 3 or self.pan.ndim != 3:
            raise FormatError("triplet arrays must be planar (C, H, W)")


def _disk_mask(yy, xx, cy, cx, rad):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= rad**2


def _rect_mask(yy, xx, y0, y1, x0, x1):
    return (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    noise = rng.standard_normal((size, size))
    k = gaussian_kernel(sigma)
    return convolve1d(convolve1d(noise, k, axis=0, mode="reflect"), k, axis=1, mode="reflect")


def generate_scenes(spec: SceneSpec) -> list[np.ndarray]:
    """Deterministic scenes: every scene has at least one step edge and
    non-constant per-band histograms."""
    scenes = []
    for index in range(spec.count):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
        size, c = spec.size, spec.c
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        gx = rng.uniform(-1.0, 1.0)
        gy = rng.uniform(-1.0, 1.0)
        gradient = (gx * xx + gy * yy) / size
        texture = _smooth_noise(rng, size, sigma=max(size / 32.0, 1.0))

        masks = []
        for _ in range(rng.integers(2, 4)):
            y0, x0 = rng.integers(0, size - 2, size=2)
            hgt = rng.integers(size // 8, size // 2)
            wid = rng.integers(size // 8, size // 2)
            masks.append(_rect_mask(yy, xx, y0, y0 + hgt, x0, x0 + wid).astype(np.float64))
        cy, cx = rng.uniform(size * 0.2, size * 0.8, size=2)
        masks.append(_disk_mask(yy, xx, cy, cx, rng.uniform(size / 8, size / 3)).astype(np.float64))

        base_weights = rng.uniform(0.5, 1.0, size=c)
        scene = np.empty((c, size, size), dtype=np.float64)
        for b in range(c):
            w_grad = base_weights[b] * rng.uniform(0.6, 1.4)
            w_tex = base_weights[b] * rng.uniform(0.3, 0.8)
            band = w_grad * gradient + w_tex * texture
            for m in masks:
                band = band + base_weights[b] * rng.uniform(0.2, 0.6) * m
            scene[b] = band
        lo, hi = scene.min(), scene.max()
        span = hi - lo if hi > lo else 1.0
        scene = 0.05 + 0.9 * (scene - lo) / span
        scenes.append(scene)
    return scenes


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1D kernel truncated at 4 sigma, normalized to unit sum."""
    radius = max(int(4.0 * sigma), 1)
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def blur_decimate(img: np.ndarray, r: int) -> np.ndarray:
    """Separable gaussian blur (sigma = r/2) then decimation by r."""
    k = gaussian_kernel(r / 2.0)
    out = convolve1d(img, k, axis=1, mode="reflect")
    out = convolve1d(out, k, axis=2, mode="reflect")
    return out[:, ::r, ::r]


def wald_degrade(gt: np.ndarray, r: int, pan_weights: Optional[np.ndarray] = None) -> Triplet:
    """Degrade a ground-truth image into a (gt, lrms, pan) triplet."""
    c, H, W = gt.shape
    if H % r or W % r:
        raise FormatError(f"gt dims {H}x{W} not divisible by ratio {r}")
    if pan_weights is None:
        pan_weights = np.full(c, 1.0 / c)
    else:
        pan_weights = np.asarray(pan_weights, dtype=np.float64)
        if pan_weights.shape != (c,) or np.any(pan_weights <= 0):
            raise ValueError("pan weights must be positive, one per band")
        pan_weights = pan_weights / pan_weights.sum()
    lrms = blur_decimate(gt, r)
    pan = np.tensordot(pan_weights, gt, axes=(0, 0))[None, :, :]
    return Triplet(gt=gt, lrms=lrms, pan=pan)


def degrade_pan(pan: np.ndarray, r: int) -> np.ndarray:
    """The panchromatic image brought to the low-resolution scale (for the
    spatial-distortion metric)."""
    return blur_decimate(pan, r)


# ---------------------------------------------------------------------------
# Planar tensor files: magic "S2WT", u32 little-endian C, H, W, then
# float32 little-endian values in planar C-major order. One tensor per file.


def write_image(path, img: np.ndarray):
    img = np.asarray(img)
    if img.ndim != 3:
        raise FormatError(f"planar image must be (C, H, W), got shape {img.shape}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", *img.shape))
        fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} in {path}")
        header = fh.read(12)
        if len(header) != 12:
            raise FormatError(f"truncated header in {path}")
        c, h, w = struct.unpack("<III", header)
        count = c * h * w
        if count == 0 or count > 2**31:
            raise FormatError(f"implausible dims {(c, h, w)} in {path}")
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise FormatError(f"truncated payload in {path}")
        if fh.read(1):
            raise FormatError(f"trailing bytes in {path}")
    return np.frombuffer(raw, dtype="<f4").reshape(c, h, w).copy()


def write_pgm(path, band: np.ndarray):
    """Grayscale preview of a single band as a binary portable graymap."""
    band = np.asarray(band, dtype=np.float64)
    if band.ndim != 2:
        raise FormatError("preview expects a single 2D band")
    lo, hi = band.min(), band.max()
    span = hi - lo if hi > lo else 1.0
    scaled = np.round(255.0 * (band - lo) / span).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{band.shape[1]} {band.shape[0]}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes())


def triplet_paths(root, split: str, index: int) -> dict[str, Path]:
    base = Path(root) / split
    return {kind: base / f"{index:05d}.{kind}.s2wt" for kind in ("gt", "lrms", "pan")}


def write_triplet(root, split: str, index: int, t: Triplet):
    paths = triplet_paths(root, split, index)
    paths["gt"].parent.mkdir(parents=True, exist_ok=True)
    write_image(paths["gt"], t.gt)
    write_image(paths["lrms"], t.lrms)
    write_image(paths["pan"], t.pan)


def read_triplet(root, split: str, index: int) -> Triplet:
    paths = triplet_paths(root, split, index)
    return Triplet(
        gt=read_image(paths["gt"]).astype(np.float64),
        lrms=read_image(paths["lrms"]).astype(np.float64),
        pan=read_image(paths["pan"]).astype(np.float64),
    )


def load_split(root, split: str) -> list[Triplet]:
    base = Path(root) / split
    if not base.is_dir():
        raise FormatError(f"no {split!r} split under {root}")
    indices = sorted({int(p.name.split(".")[0]) for p in base.glob("*.gt.s2wt")})
    if not indices:
        raise FormatError(f"no triplets in {base}")
    return [read_triplet(root, split, i) for i in indices]
