"""Multi-scale dynamic gating of the two branch outputs.

The gate head turns interactively enhanced, normalized features into three
per-pixel gates and applies

    out = x_main * (1 + G_dec + G_mul * x_extra) + G_add

With the gate head zeroed the output is x_main exactly, which makes the whole
residual path start as a clean identity. Two gates run with swapped input
roles and a learned scalar rate blends them.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import (
    Module,
    Parameter,
    ShapeError,
    Tensor,
    broadcast_channels,
    channel_mean,
    concat_channels,
    depthwise_conv2d,
    gelu,
    layernorm,
    linear,
    mul,
    narrow_channels,
    sigmoid,
    tanh,
)
from .fmamba import TokenSeq, derasterize, rasterize
from .branches import Conv2dLayer

__all__ = ["GateBundle", "MsdgParams", "msdg_gate", "dual_msdg"]


class GateBundle:
    """The three gate maps; multiplicative and modulation gates are
    tanh-bounded, the additive gate is unbounded."""

    def __init__(self, g_mul: Tensor, g_dec: Tensor, g_add: Tensor):
        self.g_mul = g_mul
        self.g_dec = g_dec
        self.g_add = g_add


class _InteractiveEnhance(Module):
    """Mutual channel gating: each input is residually scaled by a sigmoid
    1x1 projection of the other."""

    def __init__(self, c: int, rng: np.random.Generator):
        self.to_x = Conv2dLayer(c, c, 1, rng=rng)
        self.to_y = Conv2dLayer(c, c, 1, rng=rng)

    def __call__(self, x: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
        x_ref = x + mul(x, sigmoid(self.to_x(y)))
        y_ref = y + mul(y, sigmoid(self.to_y(x)))
        return x_ref, y_ref


class _RegionalExtract(Module):
    """Depthwise k x k, pointwise mix, gelu."""

    def __init__(self, c: int, k: int, rng: np.random.Generator):
        self.k = k
        self.pad = (k - 1) // 2
        bound = 1.0 / np.sqrt(k * k)
        self.dw = Parameter(rng.uniform(-bound, bound, size=(c, k, k)))
        self.dw_b = Parameter(np.zeros(c))
        self.pw = Conv2dLayer(c, c, 1, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        return gelu(self.pw(depthwise_conv2d(x, self.dw, pad=self.pad, bias=self.dw_b)))


class _GlobalExtract(Module):
    """Pool to a channel vector, bottleneck (reduction 4), broadcast back."""

    def __init__(self, c: int, rng: np.random.Generator):
        hidden = max(c // 4, 1)
        bound1 = 1.0 / np.sqrt(c)
        bound2 = 1.0 / np.sqrt(hidden)
        self.w1 = Parameter(rng.uniform(-bound1, bound1, size=(c, hidden)))
        self.b1 = Parameter(np.zeros(hidden))
        self.w2 = Parameter(rng.uniform(-bound2, bound2, size=(hidden, c)))
        self.b2 = Parameter(np.zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        _, h, w = x.shape
        z = channel_mean(x)
        z = linear(gelu(linear(z, self.w1, self.b1)), self.w2, self.b2)
        return broadcast_channels(z, h, w)


class MsdgParams(Module):
    """Interactive enhancement, local (1x1 and 3x3) and global feature paths,
    and a zero-initialized head emitting the three gates."""

    def __init__(self, c: int, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c = c
        self.ieb = _InteractiveEnhance(c, rng)
        self.ln_gamma = Parameter(np.ones(2 * c))
        self.ln_beta = Parameter(np.zeros(2 * c))
        self.rfeb1 = _RegionalExtract(2 * c, 1, rng)
        self.rfeb3 = _RegionalExtract(2 * c, 3, rng)
        self.gfeb = _GlobalExtract(2 * c, rng)
        self.gate_head = Conv2dLayer(2 * c, 3 * c, 1, rng=rng, zero_init=True)

    def gates(self, x_main: Tensor, x_extra: Tensor) -> GateBundle:
        x_ref, y_ref = self.ieb(x_main, x_extra)
        cat = concat_channels([x_ref, y_ref])
        _, h, w = cat.shape
        tokens = rasterize(cat)
        normed = derasterize(TokenSeq(layernorm(tokens.tokens, self.ln_gamma, self.ln_beta), h, w))
        agg = self.rfeb1(normed) + self.rfeb3(normed) + self.gfeb(normed)
        raw = self.gate_head(agg)
        c = self.c
        return GateBundle(
            g_mul=tanh(narrow_channels(raw, 0, c)),
            g_dec=tanh(narrow_channels(raw, c, c)),
            g_add=narrow_channels(raw, 2 * c, c),
        )


def msdg_gate(
    x_main: Tensor,
    x_extra: Tensor,
    p: MsdgParams,
    no_gm: bool = False,
    no_gc: bool = False,
    no_ga: bool = False,
) -> Tensor:
    """out = x_main * (1 + G_dec + G_mul * x_extra) + G_add.

    Disabled gates are replaced by detached zeros.
    """
    if x_main.shape != x_extra.shape:
        raise ShapeError(f"gate input shapes differ: {x_main.shape} vs {x_extra.shape}")
    g = p.gates(x_main, x_extra)
    zeros = None
    if no_gm or no_gc or no_ga:
        zeros = Tensor(np.zeros_like(x_main.data))
    g_mul = zeros if no_gm else g.g_mul
    g_dec = zeros if no_gc else g.g_dec
    g_add = zeros if no_ga else g.g_add
    modulation = 1.0 + g_dec + mul(g_mul, x_extra)
    return mul(x_main, modulation) + g_add


def dual_msdg(
    o1: Tensor,
    o2: Tensor,
    p1: MsdgParams,
    p2: MsdgParams,
    rho: Tensor,
    no_gm: bool = False,
    no_gc: bool = False,
    no_ga: bool = False,
) -> Tensor:
    """Blend the two role orderings with a learned swap rate sigma(rho)."""
    s = sigmoid(rho)
    a = msdg_gate(o1, o2, p1, no_gm=no_gm, no_gc=no_gc, no_ga=no_ga)
    b = msdg_gate(o2, o1, p2, no_gm=no_gm, no_gc=no_gc, no_ga=no_ga)
    return mul(a, s) + mul(b, 1.0 - s)
