"""Full network assembly, the l1 objective, desk-scale training, ablation
variants, and checkpoint serialization.

The model predicts a residual on top of the bicubically upsampled
multispectral input: hrms = upsample(lrms) + res. With the residual path
zeroed the network is exactly the bicubic upsampler.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import metrics as _metrics
from .branches import Conv2dLayer, SpatialBranch, SpectralBranch, bicubic_upsample
from .dataset import FormatError, Triplet
from .fmamba import FMambaParams
from .msdg import MsdgParams, dual_msdg
from .tensor import (
    Module,
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    abs_,
    broadcast_channels,
    channel_mean,
    concat_channels,
    gelu,
    linear,
    mean_,
    mul,
    narrow_channels,
    no_grad,
    sigmoid,
    sub,
)

__all__ = [
    "ModelConfig",
    "AblationConfig",
    "ABLATION_NAMES",
    "TrainConfig",
    "S2WMambaNet",
    "DivergenceError",
    "l1_loss",
    "AdamW",
    "lr_at_epoch",
    "train_toy",
    "apply_ablation",
    "count_parameters",
    "zero_residual_path",
    "save_checkpoint",
    "load_checkpoint",
]

_STRUCTURAL = ("SpeO", "SpaO", "SeqB1", "SeqB2", "CRM", "HP", "AWS")
ABLATION_NAMES = _STRUCTURAL + ("no_Gm", "no_Gc", "no_Ga")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class AblationConfig:
    """One structural variant at most; gate toggles may combine freely."""

    variant: Optional[str] = None
    no_gm: bool = False
    no_gc: bool = False
    no_ga: bool = False

    def __post_init__(self):
        if self.variant is not None and self.variant not in _STRUCTURAL:
            raise ValueError(f"unknown structural variant {self.variant!r}")

    @classmethod
    def from_name(cls, name: str) -> "AblationConfig":
        if name in _STRUCTURAL:
            return cls(variant=name)
        if name == "no_Gm":
            return cls(no_gm=True)
        if name == "no_Gc":
            return cls(no_gc=True)
        if name == "no_Ga":
            return cls(no_ga=True)
        raise ValueError(f"unknown ablation {name!r}; choose from {ABLATION_NAMES}")


@dataclass(frozen=True)
class ModelConfig:
    c: int = 8
    r: int = 4
    width: int = 32
    d_state: int = 16
    conv_width: int = 4
    raw_skip: bool = False
    variant: Optional[str] = None
    no_gm: bool = False
    no_gc: bool = False
    no_ga: bool = False


@dataclass
class TrainConfig:
    """Desk-scale defaults; the reference schedule (360 epochs, batch 32) is
    configuration, not the default."""

    learning_rate: float = 4e-4
    lr_decay: float = 0.7
    lr_decay_every_epochs: int = 100
    steps: int = 200
    batch_size: int = 4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    patch: int = 16
    seed: int = 0
    val_every: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 < self.lr_decay < 1.0):
            raise ValueError("lr_decay must be in (0, 1)")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.learning_rate * cfg.lr_decay ** (epoch // cfg.lr_decay_every_epochs)


class ConvFusionBlock(Module):
    """Residual block of two 3x3 convs with a gelu, fusing by addition.

    Drop-in replacement for the scan-based fusion block in the conv ablation.
    """

    def __init__(self, width: int, rng: np.random.Generator):
        self.conv1 = Conv2dLayer(width, width, 3, rng=rng)
        self.conv2 = Conv2dLayer(width, width, 3, rng=rng)

    def __call__(self, x: Tensor, y: Tensor):
        z = x + y
        return z + self.conv2(gelu(self.conv1(z))), x, y


class _ChannelAttention(Module):
    """Per-channel sigmoid weights from pooled concatenated features."""

    def __init__(self, c: int, rng: np.random.Generator):
        hidden = max(c // 4, 4)
        b1 = 1.0 / np.sqrt(2 * c)
        b2 = 1.0 / np.sqrt(hidden)
        self.w1 = Parameter(rng.uniform(-b1, b1, size=(2 * c, hidden)))
        self.b1 = Parameter(np.zeros(hidden))
        self.w2 = Parameter(rng.uniform(-b2, b2, size=(hidden, 2 * c)))
        self.b2 = Parameter(np.zeros(2 * c))

    def __call__(self, o1: Tensor, o2: Tensor) -> Tensor:
        c, h, w = o1.shape
        z = channel_mean(concat_channels([o1, o2]))
        wts = sigmoid(linear(gelu(linear(z, self.w1, self.b1)), self.w2, self.b2))
        w1 = broadcast_channels(narrow_channels(wts, 0, c), h, w)
        w2 = broadcast_channels(narrow_channels(wts, c, c), h, w)
        return mul(o1, w1) + mul(o2, w2)


class S2WMambaNet(Module):
    """Residual pansharpening network. Construction is deterministic in
    (config, seed); every parameter is reachable by a unique dotted name."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        c, r, width = config.c, config.r, config.width

        if config.variant == "CRM":
            def block_factory():
                return ConvFusionBlock(width, rng)
        else:
            def block_factory():
                return FMambaParams(width, d_state=config.d_state, conv_width=config.conv_width, rng=rng)

        v = config.variant
        if v != "SpaO":
            self.spectral = SpectralBranch(c, r, width=width, rng=rng, block_factory=block_factory)
        if v != "SpeO":
            self.spatial = SpatialBranch(c, width=width, rng=rng, block_factory=block_factory)
        if v in ("SpeO", "SpaO"):
            self.head = Conv2dLayer(c, c, 3, rng=rng)
        if v == "SeqB1":
            self.seq_adapter = Conv2dLayer(c, 1, 1, rng=rng)
        if v == "SeqB2":
            self.seq_adapter = Conv2dLayer(c, width, r, stride=r, pad=0, rng=rng)
        if v == "AWS":
            self.aws = _ChannelAttention(c, rng)
        if v in (None, "CRM"):
            self.msdg1 = MsdgParams(c, rng=rng)
            self.msdg2 = MsdgParams(c, rng=rng)
            self.rho = Parameter(np.zeros(()))
        self._finalize_names()

    def _finalize_names(self):
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def _check_inputs(self, pan: Tensor, lrms: Tensor):
        c, r = self.config.c, self.config.r
        if pan.ndim != 3 or pan.shape[0] != 1:
            raise ShapeError(f"pan must be (1, H, W), got {pan.shape}")
        H, W = pan.shape[1:]
        if H % r or W % r:
            raise ShapeError(f"pan dims {H}x{W} not divisible by ratio {r}")
        if lrms.shape != (c, H // r, W // r):
            raise ShapeError(f"lrms shape {lrms.shape} incompatible with pan {pan.shape} at (c={c}, r={r})")

    def forward_parts(self, pan, lrms, trace: Optional[list] = None) -> dict:
        """Run the variant-specific pipeline; returns the intermediates."""
        pan = pan if isinstance(pan, Tensor) else Tensor(np.asarray(pan, dtype=np.float64))
        lrms = lrms if isinstance(lrms, Tensor) else Tensor(np.asarray(lrms, dtype=np.float64))
        self._check_inputs(pan, lrms)
        cfg = self.config
        up = Tensor(bicubic_upsample(lrms.data, cfg.r))
        parts: dict = {"up": up}
        v = cfg.variant

        if v == "SpeO":
            o1 = self.spectral(pan, lrms, trace=trace)
            res = self.head(o1)
            parts.update(o1=o1, res=res)
        elif v == "SpaO":
            o2 = self.spatial(pan, up, trace=trace)
            res = self.head(o2)
            parts.update(o2=o2, res=res)
        elif v == "SeqB1":
            o1 = self.spectral(pan, lrms, trace=trace)
            l0 = up + o1
            o2 = self.spatial(self.seq_adapter(o1), l0, trace=trace)
            res = o2
            parts.update(o1=o1, o2=o2, res=res)
        elif v == "SeqB2":
            o2 = self.spatial(pan, up, trace=trace)
            o1 = self.spectral(pan, lrms, m0=self.seq_adapter(o2), trace=trace)
            res = o1
            parts.update(o1=o1, o2=o2, res=res)
        elif v == "HP":
            o1 = self.spectral(pan, lrms, trace=trace)
            l0 = up + o1
            o2 = self.spatial(pan, l0, trace=trace)
            res = mul(o1, o2)
            parts.update(o1=o1, o2=o2, res=res)
        elif v == "AWS":
            o1 = self.spectral(pan, lrms, trace=trace)
            l0 = up + o1
            o2 = self.spatial(pan, l0, trace=trace)
            res = self.aws(o1, o2)
            parts.update(o1=o1, o2=o2, res=res)
        else:  # full model, optionally with conv fusion or disabled gates
            o1 = self.spectral(pan, lrms, trace=trace)
            l0 = up + o1
            o2 = self.spatial(pan, l0, trace=trace)
            res = dual_msdg(
                o1, o2, self.msdg1, self.msdg2, self.rho,
                no_gm=cfg.no_gm, no_gc=cfg.no_gc, no_ga=cfg.no_ga,
            )
            parts.update(o1=o1, o2=o2, res=res)

        parts["hrms"] = up + res
        return parts

    def forward(self, pan, lrms, trace: Optional[list] = None) -> Tensor:
        return self.forward_parts(pan, lrms, trace=trace)["hrms"]


def l1_loss(pred, gt) -> Tensor:
    """Mean absolute error over all elements; lists average over samples."""
    if isinstance(pred, (list, tuple)):
        if len(pred) != len(gt) or not pred:
            raise ShapeError("batched l1_loss needs equally sized, nonempty lists")
        total = None
        for p, g in zip(pred, gt):
            term = l1_loss(p, g)
            total = term if total is None else total + term
        return total * (1.0 / len(pred))
    if pred.shape != gt.shape:
        raise ShapeError(f"l1_loss shape mismatch: {pred.shape} vs {gt.shape}")
    return mean_(abs_(sub(pred, gt)))


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params, lr=4e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = [p for p in params]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)


def _crop_triplet(rng: np.random.Generator, t: Triplet, patch: int, r: int):
    c, H, W = t.gt.shape
    if patch >= H and patch >= W:
        return t.pan, t.lrms, t.gt
    max_i = (H - patch) // r
    max_j = (W - patch) // r
    oi = int(rng.integers(0, max_i + 1)) * r
    oj = int(rng.integers(0, max_j + 1)) * r
    gt = t.gt[:, oi : oi + patch, oj : oj + patch]
    pan = t.pan[:, oi : oi + patch, oj : oj + patch]
    lrms = t.lrms[:, oi // r : (oi + patch) // r, oj // r : (oj + patch) // r]
    return pan, lrms, gt


def _val_psnr(model: S2WMambaNet, val: Sequence[Triplet]) -> float:
    scores = []
    with no_grad():
        for t in val:
            pred = model.forward(t.pan, t.lrms).data
            scores.append(_metrics.psnr(pred, t.gt, peak=1.0))
    return float(np.mean(scores))


def train_toy(
    model: S2WMambaNet,
    train_set: Sequence[Triplet],
    cfg: TrainConfig,
    val_set: Optional[Sequence[Triplet]] = None,
    ckpt_path=None,
) -> list[dict]:
    """Seed-pinned optimizer loop; returns one history record per step.

    Records carry step, loss, lr, and val_psnr at val_every intervals. A
    non-finite loss aborts with DivergenceError. steps=0 leaves the model
    untouched and returns an empty history.
    """
    if not train_set:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    n = len(train_set)
    r = model.config.r
    history: list[dict] = []
    for step in range(1, cfg.steps + 1):
        epoch = ((step - 1) * cfg.batch_size) // n
        opt.lr = lr_at_epoch(cfg, epoch)
        try:
            preds, gts = [], []
            for _ in range(cfg.batch_size):
                t = train_set[int(rng.integers(0, n))]
                pan, lrms, gt = _crop_triplet(rng, t, cfg.patch, r)
                preds.append(model.forward(pan, lrms))
                gts.append(Tensor(np.asarray(gt, dtype=np.float64)))
            loss = l1_loss(preds, gts)
        except NonFiniteError as exc:
            raise DivergenceError(f"training diverged at step {step}: {exc}") from exc
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise DivergenceError(f"loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        rec = {"step": step, "loss": loss_val, "lr": opt.lr}
        if val_set and (step % cfg.val_every == 0 or step == cfg.steps):
            rec["val_psnr"] = _val_psnr(model, val_set)
        history.append(rec)
    if ckpt_path is not None:
        save_checkpoint(model, ckpt_path)
    return history


def apply_ablation(model: S2WMambaNet, ablation: AblationConfig) -> S2WMambaNet:
    """Build the requested variant with the model's config and init seed."""
    cfg = replace(
        model.config,
        variant=ablation.variant,
        no_gm=ablation.no_gm,
        no_gc=ablation.no_gc,
        no_ga=ablation.no_ga,
    )
    return S2WMambaNet(cfg, seed=model.seed)


def count_parameters(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def zero_residual_path(model: S2WMambaNet):
    """Zero every residual entry point so forward equals bicubic upsampling."""
    if hasattr(model, "spectral"):
        model.spectral.out_conv.zero_()
    if hasattr(model, "spatial"):
        last = model.spatial.stages[-1]
        last.back_l.zero_()
        last.back_h.zero_()
    if hasattr(model, "head"):
        model.head.zero_()
    if hasattr(model, "msdg1"):
        model.msdg1.gate_head.zero_()
        model.msdg2.gate_head.zero_()
    if hasattr(model, "aws"):
        pass  # zero branch outputs already zero the weighted sum


# ---------------------------------------------------------------------------
# Checkpoint format: magic "S2WC", u16 version, then per record
# (u16 name length, name bytes, u8 rank, u32 dims..., f32 little-endian data).
# The first record, "meta.config", encodes the model configuration.

_CKPT_MAGIC = b"S2WC"
_CKPT_VERSION = 1
_META_NAME = "meta.config"
_VARIANT_IDS = {None: 0, "SpeO": 1, "SpaO": 2, "SeqB1": 3, "SeqB2": 4, "CRM": 5, "HP": 6, "AWS": 7}
_VARIANT_FROM_ID = {v: k for k, v in _VARIANT_IDS.items()}


def _config_vector(model: S2WMambaNet) -> np.ndarray:
    cfg = model.config
    return np.array(
        [
            cfg.r,
            cfg.c,
            cfg.width,
            cfg.d_state,
            cfg.conv_width,
            _VARIANT_IDS[cfg.variant],
            int(cfg.no_gm),
            int(cfg.no_gc),
            int(cfg.no_ga),
            int(cfg.raw_skip),
            model.seed,
        ],
        dtype=np.float64,
    )


def _config_from_vector(vec: np.ndarray) -> tuple[ModelConfig, int]:
    if vec.size != 11:
        raise FormatError(f"checkpoint config record has {vec.size} entries, expected 11")
    r, c, width, d_state, conv_width, vid, gm, gc, ga, raw, seed = [int(round(v)) for v in vec]
    if vid not in _VARIANT_FROM_ID:
        raise FormatError(f"unknown variant id {vid} in checkpoint")
    cfg = ModelConfig(
        c=c,
        r=r,
        width=width,
        d_state=d_state,
        conv_width=conv_width,
        raw_skip=bool(raw),
        variant=_VARIANT_FROM_ID[vid],
        no_gm=bool(gm),
        no_gc=bool(gc),
        no_ga=bool(ga),
    )
    return cfg, seed


def _write_record(fh, name: str, arr: np.ndarray):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(model: S2WMambaNet, path):
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<H", _CKPT_VERSION))
        _write_record(fh, _META_NAME, _config_vector(model))
        for name, p in model.named_parameters():
            _write_record(fh, name, p.data)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> S2WMambaNet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != _CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        records: dict[str, np.ndarray] = {}
        order: list[str] = []
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise FormatError("truncated checkpoint record header")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            dims = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "dims"))[0] for _ in range(rank)
            )
            count = int(np.prod(dims)) if dims else 1
            raw = _read_exact(fh, 4 * count, f"data of {name}")
            records[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)
            order.append(name)
    if _META_NAME not in records:
        raise FormatError("checkpoint is missing its config record")
    cfg, seed = _config_from_vector(records.pop(_META_NAME))
    model = S2WMambaNet(cfg, seed=seed)
    for name, p in model.named_parameters():
        if name not in records:
            raise FormatError(f"checkpoint is missing parameter {name}")
        arr = records.pop(name)
        if arr.shape != p.data.shape:
            raise FormatError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
        p.data[...] = arr
    if records:
        raise FormatError(f"checkpoint has unexpected records: {sorted(records)}")
    return model
