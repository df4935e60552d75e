"""Reduced-resolution and full-resolution fusion quality metrics.

All functions take planar (C, H, W) arrays. The reduced-resolution suite
compares against a reference; the full-resolution suite is no-reference and
composes spectral and spatial distortion into hqnr = (1 - d_lambda)(1 - d_s).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "MetricError",
    "MetricsReport",
    "psnr",
    "sam",
    "ergas",
    "uiqi",
    "q2n",
    "d_lambda",
    "d_s",
    "hqnr",
]

log = logging.getLogger(__name__)

_EPS = 1e-12


class MetricError(ValueError):
    """The metric is undefined for the given inputs."""


@dataclass
class MetricsReport:
    psnr: Optional[float] = None
    sam: Optional[float] = None
    ergas: Optional[float] = None
    q2n: Optional[float] = None
    d_lambda: Optional[float] = None
    d_s: Optional[float] = None
    hqnr: Optional[float] = None

    def lines(self) -> list[str]:
        out = []
        for key in ("psnr", "sam", "ergas", "q2n", "d_lambda", "d_s", "hqnr"):
            val = getattr(self, key)
            if val is not None:
                out.append(f"{key}={'inf' if np.isinf(val) else format(val, '.6f')}")
        return out


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim != 3:
        raise MetricError(f"expected planar (C, H, W), got {pred.shape}")


def psnr(pred: np.ndarray, gt: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) over all bands; +inf when identical."""
    _check_pair(pred, gt)
    if peak <= 0:
        raise MetricError("peak must be positive")
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - gt) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def sam(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-pixel spectral angle in degrees; zero-norm pixels are skipped."""
    _check_pair(pred, gt)
    p = np.asarray(pred, dtype=np.float64).reshape(pred.shape[0], -1)
    g = np.asarray(gt, dtype=np.float64).reshape(gt.shape[0], -1)
    np_norm = np.linalg.norm(p, axis=0)
    ng_norm = np.linalg.norm(g, axis=0)
    valid = (np_norm > _EPS) & (ng_norm > _EPS)
    skipped = int((~valid).sum())
    if skipped:
        log.info("sam: skipped %d zero-norm pixels", skipped)
    if not valid.any():
        raise MetricError("sam undefined: all pixels have zero-norm spectra")
    cos = (p[:, valid] * g[:, valid]).sum(axis=0) / (np_norm[valid] * ng_norm[valid])
    angles = np.arccos(np.clip(cos, -1.0, 1.0))
    return float(np.degrees(angles.mean()))


def ergas(pred: np.ndarray, gt: np.ndarray, r: int) -> float:
    """100/r * sqrt(mean over bands of (RMSE_b / mean_b)^2)."""
    _check_pair(pred, gt)
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    mu = g.reshape(g.shape[0], -1).mean(axis=1)
    if np.any(np.abs(mu) < _EPS):
        raise MetricError("ergas undefined: a reference band has zero mean")
    rmse = np.sqrt(((p - g) ** 2).reshape(g.shape[0], -1).mean(axis=1))
    return float(100.0 / r * np.sqrt(np.mean((rmse / mu) ** 2)))


# ---------------------------------------------------------------------------
# Universal quality index and its hypercomplex extension


def _blocks(h: int, w: int, block: int):
    """Non-overlapping block anchors; one whole-image block when smaller."""
    if h < block or w < block:
        yield 0, 0, h, w
        return
    ys = list(range(0, h - block + 1, block))
    xs = list(range(0, w - block + 1, block))
    if ys[-1] + block < h:
        ys.append(h - block)
    if xs[-1] + block < w:
        xs.append(w - block)
    for y in ys:
        for x in xs:
            yield y, x, block, block


def _q_scalar(a: np.ndarray, b: np.ndarray) -> float:
    """Universal quality index of two equally sized 2D blocks."""
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    mu1, mu2 = a.mean(), b.mean()
    v1 = a.var()
    v2 = b.var()
    cov = ((a - mu1) * (b - mu2)).mean()
    vt = v1 + v2
    mt = mu1 * mu1 + mu2 * mu2
    if vt < _EPS and mt < _EPS:
        return 1.0
    if vt < _EPS:
        return 2.0 * mu1 * mu2 / mt
    if mt < _EPS:
        return 2.0 * cov / vt
    return float(4.0 * cov * mu1 * mu2 / (vt * mt))


def uiqi(a: np.ndarray, b: np.ndarray, block: int = 32) -> float:
    """Blockwise-averaged universal quality index of two single bands."""
    if a.shape != b.shape or a.ndim != 2:
        raise MetricError(f"uiqi expects equal 2D bands, got {a.shape} vs {b.shape}")
    vals = [_q_scalar(a[y : y + bh, x : x + bw], b[y : y + bh, x : x + bw]) for y, x, bh, bw in _blocks(*a.shape, block)]
    return float(np.mean(vals))


def _cd_conj(z: np.ndarray) -> np.ndarray:
    out = -z.copy()
    out[..., 0] = z[..., 0]
    return out


def _cd_mul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Cayley-Dickson product along the last axis (length a power of two)."""
    n = p.shape[-1]
    if n == 1:
        return p * q
    half = n // 2
    a, b = p[..., :half], p[..., half:]
    c, d = q[..., :half], q[..., half:]
    left = _cd_mul(a, c) - _cd_mul(_cd_conj(d), b)
    right = _cd_mul(d, a) + _cd_mul(b, _cd_conj(c))
    return np.concatenate([left, right], axis=-1)


def _q_hyper(a: np.ndarray, b: np.ndarray) -> float:
    """Hypercomplex quality index of two (M, 2^n) pixel-spectrum blocks."""
    mu1 = a.mean(axis=0)
    mu2 = b.mean(axis=0)
    v1 = float((a * a).sum(axis=1).mean() - (mu1 * mu1).sum())
    v2 = float((b * b).sum(axis=1).mean() - (mu2 * mu2).sum())
    cov = _cd_mul(a, _cd_conj(b)).mean(axis=0) - _cd_mul(mu1, _cd_conj(mu2))
    m1 = float(np.sqrt((mu1 * mu1).sum()))
    m2 = float(np.sqrt((mu2 * mu2).sum()))
    vt = v1 + v2
    mt = m1 * m1 + m2 * m2
    if vt < _EPS and mt < _EPS:
        return 1.0
    if vt < _EPS:
        return 2.0 * m1 * m2 / mt
    if mt < _EPS:
        return 2.0 * float(np.linalg.norm(cov)) / vt
    return 4.0 * float(np.linalg.norm(cov)) * m1 * m2 / (vt * mt)


def q2n(pred: np.ndarray, gt: np.ndarray, block: int = 32) -> float:
    """Blockwise hypercomplex universal quality index, averaged over blocks.

    Bands are zero-padded to the next power of two; with one band this is the
    blockwise universal quality index (up to sign).
    """
    _check_pair(pred, gt)
    c, h, w = pred.shape
    if h < 2 or w < 2:
        raise MetricError("image too small for q2n")
    n = 1 << max(int(np.ceil(np.log2(c))), 0)
    p = np.zeros((n, h, w), dtype=np.float64)
    g = np.zeros((n, h, w), dtype=np.float64)
    p[:c] = pred
    g[:c] = gt
    vals = []
    for y, x, bh, bw in _blocks(h, w, block):
        a = p[:, y : y + bh, x : x + bw].reshape(n, -1).T
        b = g[:, y : y + bh, x : x + bw].reshape(n, -1).T
        if n == 1:
            vals.append(abs(_q_scalar(a[:, 0].reshape(bh, bw), b[:, 0].reshape(bh, bw))))
        else:
            vals.append(_q_hyper(a, b))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# No-reference, full-resolution suite


def _constant_bands(img: np.ndarray) -> np.ndarray:
    return img.reshape(img.shape[0], -1).var(axis=1) < _EPS


def d_lambda(fused: np.ndarray, lrms: np.ndarray, block: int = 32) -> float:
    """Mean over band pairs of |Q(F_i, F_j) - Q(L_i, L_j)|."""
    if fused.ndim != 3 or lrms.ndim != 3 or fused.shape[0] != lrms.shape[0]:
        raise MetricError("d_lambda expects planar images with matching band counts")
    c = fused.shape[0]
    degenerate = _constant_bands(fused) | _constant_bands(lrms)
    if degenerate.any():
        log.info("d_lambda: skipping %d constant bands", int(degenerate.sum()))
    diffs = []
    for i in range(c):
        for j in range(i + 1, c):
            if degenerate[i] or degenerate[j]:
                continue
            qf = uiqi(fused[i], fused[j], block)
            ql = uiqi(lrms[i], lrms[j], block)
            diffs.append(abs(qf - ql))
    if not diffs:
        raise MetricError("d_lambda undefined: every band pair is degenerate")
    return float(np.mean(diffs))


def d_s(fused: np.ndarray, lrms: np.ndarray, pan: np.ndarray, pan_lp: np.ndarray, block: int = 32) -> float:
    """Mean over bands of |Q(F_i, PAN) - Q(L_i, PAN_lp)|."""
    if pan.ndim != 3 or pan.shape[0] != 1 or pan_lp.ndim != 3 or pan_lp.shape[0] != 1:
        raise MetricError("d_s expects single-band pan images")
    c = fused.shape[0]
    degenerate = _constant_bands(fused) | _constant_bands(lrms)
    if degenerate.any():
        log.info("d_s: skipping %d constant bands", int(degenerate.sum()))
    diffs = []
    for i in range(c):
        if degenerate[i]:
            continue
        q_hr = uiqi(fused[i], pan[0], block)
        q_lr = uiqi(lrms[i], pan_lp[0], block)
        diffs.append(abs(q_hr - q_lr))
    if not diffs:
        raise MetricError("d_s undefined: every band is degenerate")
    return float(np.mean(diffs))


def hqnr(d_lambda_value: float, d_s_value: float) -> float:
    """(1 - d_lambda) * (1 - d_s)."""
    return (1.0 - d_lambda_value) * (1.0 - d_s_value)
