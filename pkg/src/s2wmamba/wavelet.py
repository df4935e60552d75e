"""Exact Haar analysis/synthesis transforms and their pyramid constructors.

The spatial transform works on non-overlapping 2x2 blocks with /4-normalized
analysis and unit-coefficient synthesis; the channel transform pairs adjacent
channels with /2-normalized analysis. Synthesis after analysis is the identity
in exact arithmetic, so both directions are differentiable linear maps with
constant Jacobians.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, accum_grad, op_result

__all__ = [
    "Subbands2D",
    "Pyramid2D",
    "Pyramid1D",
    "dwt2d",
    "idwt2d",
    "dwt1d",
    "idwt1d",
    "build_pyramid2d",
    "build_pyramid1d",
]


@dataclass
class Subbands2D:
    """One-level quad: approximation plus horizontal/vertical/diagonal detail."""

    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor

    @property
    def shape(self):
        return self.ll.shape


def _block2d(x: Tensor, i0: int, j0: int) -> Tensor:
    """Strided pick of one corner of every 2x2 block."""
    out = x.data[:, i0::2, j0::2].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, i0::2, j0::2] = g
        accum_grad(x, gx)

    return op_result(out, (x,), backward)


def _interleave2d(a11: Tensor, a12: Tensor, a21: Tensor, a22: Tensor) -> Tensor:
    """Reassemble 2x2 blocks from their four corner maps."""
    C, h, w = a11.data.shape
    out = np.empty((C, 2 * h, 2 * w), dtype=a11.data.dtype)
    out[:, 0::2, 0::2] = a11.data
    out[:, 0::2, 1::2] = a12.data
    out[:, 1::2, 0::2] = a21.data
    out[:, 1::2, 1::2] = a22.data

    def backward(g):
        accum_grad(a11, g[:, 0::2, 0::2])
        accum_grad(a12, g[:, 0::2, 1::2])
        accum_grad(a21, g[:, 1::2, 0::2])
        accum_grad(a22, g[:, 1::2, 1::2])

    return op_result(out, (a11, a12, a21, a22), backward)


def dwt2d(x: Tensor) -> Subbands2D:
    """Per 2x2 block [a11,a12;a21,a22]:

    LL=(a11+a12+a21+a22)/4, LH=(a11+a12-a21-a22)/4,
    HL=(a11-a12+a21-a22)/4, HH=(a11-a12-a21+a22)/4.
    """
    C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"dwt2d requires even H and W, got {H}x{W}")
    a11 = _block2d(x, 0, 0)
    a12 = _block2d(x, 0, 1)
    a21 = _block2d(x, 1, 0)
    a22 = _block2d(x, 1, 1)
    ll = (a11 + a12 + a21 + a22) * 0.25
    lh = (a11 + a12 - a21 - a22) * 0.25
    hl = (a11 - a12 + a21 - a22) * 0.25
    hh = (a11 - a12 - a21 + a22) * 0.25
    return Subbands2D(ll=ll, lh=lh, hl=hl, hh=hh)


def idwt2d(s: Subbands2D) -> Tensor:
    """Unit-coefficient synthesis; exact inverse of dwt2d."""
    shapes = {s.ll.shape, s.lh.shape, s.hl.shape, s.hh.shape}
    if len(shapes) != 1:
        raise ShapeError(f"idwt2d subband shapes differ: {sorted(shapes)}")
    a11 = s.ll + s.lh + s.hl + s.hh
    a12 = s.ll + s.lh - s.hl - s.hh
    a21 = s.ll - s.lh + s.hl - s.hh
    a22 = s.ll - s.lh - s.hl + s.hh
    return _interleave2d(a11, a12, a21, a22)


def _stride_channels(x: Tensor, start: int) -> Tensor:
    out = x.data[start::2].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start::2] = g
        accum_grad(x, gx)

    return op_result(out, (x,), backward)


def _interleave_channels(even: Tensor, odd: Tensor) -> Tensor:
    C, H, W = even.data.shape
    out = np.empty((2 * C, H, W), dtype=even.data.dtype)
    out[0::2] = even.data
    out[1::2] = odd.data

    def backward(g):
        accum_grad(even, g[0::2])
        accum_grad(odd, g[1::2])

    return op_result(out, (even, odd), backward)


def dwt1d(x: Tensor) -> tuple[Tensor, Tensor]:
    """Adjacent channel pairs (c1, c2) -> L=(c1+c2)/2, H=(c1-c2)/2.

    Returned subbands use the non-interleaved [L, H] layout: band k of L and
    band k of H came from input channels (2k, 2k+1).
    """
    C = x.shape[0]
    if C % 2:
        raise ShapeError(f"dwt1d requires an even channel count, got {C}")
    c1 = _stride_channels(x, 0)
    c2 = _stride_channels(x, 1)
    low = (c1 + c2) * 0.5
    high = (c1 - c2) * 0.5
    return low, high


def idwt1d(low: Tensor, high: Tensor) -> Tensor:
    """c1 = L+H, c2 = L-H per pair; exact inverse of dwt1d."""
    if low.shape != high.shape:
        raise ShapeError(f"idwt1d subband shapes differ: {low.shape} vs {high.shape}")
    c1 = low + high
    c2 = low - high
    return _interleave_channels(c1, c2)


@dataclass
class Pyramid2D:
    """Spatial pyramid: level i (1-based) holds the quad from splitting the
    previous level's approximation, at half its side length."""

    root: Tensor
    levels: list[Subbands2D]

    @property
    def n_levels(self) -> int:
        return len(self.levels)


@dataclass
class Pyramid1D:
    """Channel-frequency pyramid: level i halves the channel count of the
    previous approximation; spatial dims never change."""

    root: Tensor
    levels: list[tuple[Tensor, Tensor]]

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def _int_log2(n: int, what: str) -> int:
    k = int(n).bit_length() - 1
    if n <= 0 or (1 << k) != n:
        raise ShapeError(f"{what} must be a power of two, got {n}")
    return k


def build_pyramid2d(feat: Tensor, r: int) -> Pyramid2D:
    """Recursively split the approximation for log2(r) levels."""
    n_levels = _int_log2(r, "ratio r")
    C, H, W = feat.shape
    if H % r or W % r:
        raise ShapeError(f"spatial dims {H}x{W} not divisible by ratio {r}")
    levels = []
    approx = feat
    for _ in range(n_levels):
        quad = dwt2d(approx)
        levels.append(quad)
        approx = quad.ll
    return Pyramid2D(root=feat, levels=levels)


def build_pyramid1d(l0: Tensor) -> Pyramid1D:
    """Recursively split the channel approximation for log2(c) levels."""
    c = l0.shape[0]
    n_levels = _int_log2(c, "channel count c")
    levels = []
    approx = l0
    for _ in range(n_levels):
        low, high = dwt1d(approx)
        levels.append((low, high))
        approx = low
    return Pyramid1D(root=l0, levels=levels)
