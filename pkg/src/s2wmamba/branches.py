"""The two fusion branches.

The spectral branch injects multi-scale spatial detail from a 2D pyramid of
the projected panchromatic image into the multispectral stream, doubling
resolution per stage. The spatial branch refines the panchromatic stream with
spectral components from a channel pyramid, doubling the channel count per
stage. Stage i always consumes pyramid level j = n - i + 1 so shapes line up.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import Module, Parameter, ShapeError, Tensor, conv2d
from .wavelet import Subbands2D, build_pyramid1d, build_pyramid2d, idwt1d, idwt2d

__all__ = [
    "Conv2dLayer",
    "SpectralBranch",
    "SpatialBranch",
    "bicubic_upsample",
    "DEFAULT_WIDTH",
]

DEFAULT_WIDTH = 32


class Conv2dLayer(Module):
    """Conv + bias. Same-padded when stride=1 and k odd, unless pad given."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int = 3,
        stride: int = 1,
        pad: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
        zero_init: bool = False,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        if pad is None:
            if k % 2 == 0:
                raise ShapeError("same padding needs an odd kernel")
            pad = (k - 1) // 2
        self.stride = stride
        self.pad = pad
        fan_in = c_in * k * k
        if zero_init:
            w = np.zeros((c_out, c_in, k, k))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, stride=self.stride, pad=self.pad, bias=self.b)

    def zero_(self):
        self.w.data[...] = 0.0
        self.b.data[...] = 0.0


class _SpectralStage(Module):
    """Four parallel fusion blocks, one per subband, then 2D synthesis."""

    def __init__(self, width: int, block_factory: Callable[[], Module]):
        self.fm_ll = block_factory()
        self.fm_lh = block_factory()
        self.fm_hl = block_factory()
        self.fm_hh = block_factory()

    def __call__(self, m_prev: Tensor, quad: Subbands2D) -> tuple[Tensor, Subbands2D]:
        f_ll, _, _ = self.fm_ll(m_prev, quad.ll)
        f_lh, _, _ = self.fm_lh(m_prev, quad.lh)
        f_hl, _, _ = self.fm_hl(m_prev, quad.hl)
        f_hh, _, _ = self.fm_hh(m_prev, quad.hh)
        fused = Subbands2D(ll=f_ll, lh=f_lh, hl=f_hl, hh=f_hh)
        return idwt2d(fused), fused


class SpectralBranch(Module):
    """Hierarchical spatial-detail injection over log2(r) stages."""

    def __init__(
        self,
        c: int,
        r: int,
        width: int = DEFAULT_WIDTH,
        rng: Optional[np.random.Generator] = None,
        block_factory: Optional[Callable[[], Module]] = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        if block_factory is None:
            raise ValueError("block_factory is required")
        self.c = c
        self.r = r
        self.width = width
        self.n_stages = int(r).bit_length() - 1
        if (1 << self.n_stages) != r:
            raise ShapeError(f"ratio must be a power of two, got {r}")
        self.pan_in = Conv2dLayer(1, width, 3, rng=rng)
        self.lrms_in = Conv2dLayer(c, width, 3, rng=rng)
        self.stages = [_SpectralStage(width, block_factory) for _ in range(self.n_stages)]
        self.out_conv = Conv2dLayer(width, c, 3, rng=rng)

    def __call__(
        self,
        pan: Tensor,
        lrms: Optional[Tensor] = None,
        m0: Optional[Tensor] = None,
        trace: Optional[list] = None,
    ) -> Tensor:
        if pan.shape[0] != 1:
            raise ShapeError(f"pan must be single-band, got {pan.shape}")
        H, W = pan.shape[1:]
        if H % self.r or W % self.r:
            raise ShapeError(f"pan dims {H}x{W} not divisible by ratio {self.r}")
        if m0 is None:
            if lrms is None or lrms.shape != (self.c, H // self.r, W // self.r):
                got = None if lrms is None else lrms.shape
                raise ShapeError(f"lrms shape {got} inconsistent with pan {pan.shape} at ratio {self.r}")
        elif m0.shape != (self.width, H // self.r, W // self.r):
            raise ShapeError(f"m0 shape {m0.shape} inconsistent with pan {pan.shape} at ratio {self.r}")

        pan_feat = self.pan_in(pan)
        if trace is not None:
            trace.append(("pan_conv", pan_feat.shape))
        pyramid = build_pyramid2d(pan_feat, self.r)
        if trace is not None:
            for lvl, quad in enumerate(pyramid.levels, start=1):
                trace.append((f"dwt2d_level{lvl}", (4 * quad.ll.shape[0],) + quad.ll.shape[1:]))

        m = self.lrms_in(lrms) if m0 is None else m0
        n = self.n_stages
        for i, stage in enumerate(self.stages, start=1):
            j = n - i + 1
            quad = pyramid.levels[j - 1]
            m, fused = stage(m, quad)
            if trace is not None:
                trace.append((f"fmamba_stage{i}", (4 * fused.ll.shape[0],) + fused.ll.shape[1:]))
                trace.append((f"idwt2d_stage{i}", m.shape))
        out = self.out_conv(m)
        if trace is not None:
            trace.append(("reduce_to_c", out.shape))
        return out


class _SpatialStage(Module):
    """Project streams to a shared width, fuse low/high paths, synthesize."""

    def __init__(self, ch_in: int, width: int, rng: np.random.Generator, block_factory: Callable[[], Module]):
        self.conv_p = Conv2dLayer(ch_in, width, 3, rng=rng)
        self.conv_l = Conv2dLayer(ch_in, width, 3, rng=rng)
        self.conv_h = Conv2dLayer(ch_in, width, 3, rng=rng)
        self.fm_l = block_factory()
        self.fm_h = block_factory()
        self.back_l = Conv2dLayer(width, ch_in, 3, rng=rng)
        self.back_h = Conv2dLayer(width, ch_in, 3, rng=rng)

    def __call__(self, p_prev: Tensor, low: Tensor, high: Tensor) -> Tensor:
        pw = self.conv_p(p_prev)
        f_l, _, _ = self.fm_l(pw, self.conv_l(low))
        f_h, _, _ = self.fm_h(pw, self.conv_h(high))
        return idwt1d(self.back_l(f_l), self.back_h(f_h))


class SpatialBranch(Module):
    """Guided spectral refinement over log2(c) stages, doubling channels."""

    def __init__(
        self,
        c: int,
        width: int = DEFAULT_WIDTH,
        rng: Optional[np.random.Generator] = None,
        block_factory: Optional[Callable[[], Module]] = None,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        if block_factory is None:
            raise ValueError("block_factory is required")
        self.c = c
        self.width = width
        self.n_stages = int(c).bit_length() - 1
        if (1 << self.n_stages) != c:
            raise ShapeError(f"channel count must be a power of two, got {c}")
        self.stages = [
            _SpatialStage(1 << (i - 1), width, rng, block_factory) for i in range(1, self.n_stages + 1)
        ]

    def __call__(self, pan: Tensor, l0: Tensor, trace: Optional[list] = None) -> Tensor:
        if pan.shape[0] != 1:
            raise ShapeError(f"pan must be single-band, got {pan.shape}")
        if l0.shape != (self.c,) + pan.shape[1:]:
            raise ShapeError(f"l0 shape {l0.shape} inconsistent with pan {pan.shape} and c={self.c}")
        pyramid = build_pyramid1d(l0)
        n = self.n_stages
        p = pan
        for i, stage in enumerate(self.stages, start=1):
            j = n - i + 1
            low, high = pyramid.levels[j - 1]
            if trace is not None:
                trace.append((f"dwt1d_level{j}", low.shape))
            p = stage(p, low, high)
            if trace is not None:
                trace.append((f"idwt1d_stage{i}", p.shape))
        return p


# ---------------------------------------------------------------------------
# Bicubic upsampling (Keys kernel, a = -0.5), separable and deterministic.


def _cubic_weights(t: np.ndarray) -> np.ndarray:
    at = np.abs(t)
    near = 1.5 * at**3 - 2.5 * at**2 + 1.0
    far = -0.5 * at**3 + 2.5 * at**2 - 4.0 * at + 2.0
    return np.where(at <= 1.0, near, np.where(at < 2.0, far, 0.0))


def _upsample_axis(x: np.ndarray, r: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    pos = (np.arange(n * r) + 0.5) / r - 0.5
    base = np.floor(pos).astype(int)
    frac = pos - base
    idx = np.stack([np.clip(base + m - 1, 0, n - 1) for m in range(4)])
    wts = np.stack([_cubic_weights(frac - (m - 1)) for m in range(4)])
    wts /= wts.sum(axis=0)  # exact partition of unity, so constants survive
    xm = np.moveaxis(x, axis, 0)
    out = np.zeros((n * r,) + xm.shape[1:], dtype=x.dtype)
    for m in range(4):
        out += wts[m].reshape((-1,) + (1,) * (xm.ndim - 1)) * xm[idx[m]]
    return np.moveaxis(out, 0, axis)


def bicubic_upsample(x: np.ndarray, r: int) -> np.ndarray:
    """Separable bicubic upsampling of a (C, H, W) array by an integer ratio."""
    if r < 1 or (r & (r - 1)):
        raise ShapeError(f"ratio must be a power of two, got {r}")
    if r == 1:
        return x.copy()
    x = np.asarray(x)
    out = _upsample_axis(x, r, axis=1)
    return _upsample_axis(out, r, axis=2)
