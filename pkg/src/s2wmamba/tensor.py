"""Minimal reverse-mode autodiff over dense numpy arrays.

Float64 is the default precision (all verification paths rely on it); float32
arrays are accepted and preserved for speed paths. Binary ops do not broadcast
except against scalars, so layout mistakes fail loudly instead of silently
producing wrong shapes. Every op checks its result for NaN/Inf.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Parameter",
    "Module",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "op_result",
    "accum_grad",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "sigmoid",
    "tanh",
    "gelu",
    "silu",
    "softplus",
    "abs_",
    "sum_",
    "mean_",
    "linear",
    "conv2d",
    "depthwise_conv2d",
    "causal_conv1d",
    "layernorm",
    "concat_channels",
    "narrow_channels",
    "channel_mean",
    "broadcast_channels",
    "check_gradients",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand shapes violate an op precondition."""


class NonFiniteError(ArithmeticError):
    """An op produced (or was given) NaN or Inf."""


_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class no_grad:
    """Context manager that disables graph construction (forward-only paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A dense array node in a dynamic reverse-mode graph.

    Data is immutable by convention after construction; only ``grad`` is
    mutated (accumulated) during backward passes.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_float_array(data, dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # Operator sugar; scalars are the only permitted broadcast.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


class Parameter(Tensor):
    """A trainable leaf tensor. ``name`` is stamped by the owning network."""

    __slots__ = ("name",)

    def __init__(self, data, name: Optional[str] = None, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name


def op_result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Build an op output node, wiring the backward closure when needed."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def accum_grad(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _binary_shapes(a: Tensor, b: Tensor):
    """Equal shapes, or one side a scalar; anything else is an error."""
    if a.shape == b.shape:
        return None
    if a.size == 1:
        return "a"
    if b.size == 1:
        return "b"
    raise ShapeError(f"shape mismatch {a.shape} vs {b.shape} (only scalar broadcast allowed)")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    return np.sum(g).reshape(shape) if shape != g.shape else g


def add(a: Tensor, b: Tensor) -> Tensor:
    scalar_side = _binary_shapes(a, b)
    out = a.data + b.data

    def backward(g):
        accum_grad(a, _reduce_to(g, a.shape) if scalar_side == "a" else g)
        accum_grad(b, _reduce_to(g, b.shape) if scalar_side == "b" else g)

    return op_result(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    scalar_side = _binary_shapes(a, b)
    out = a.data - b.data

    def backward(g):
        accum_grad(a, _reduce_to(g, a.shape) if scalar_side == "a" else g)
        accum_grad(b, _reduce_to(-g, b.shape) if scalar_side == "b" else -g)

    return op_result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    scalar_side = _binary_shapes(a, b)
    out = a.data * b.data

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        accum_grad(a, _reduce_to(ga, a.shape) if scalar_side == "a" else ga)
        accum_grad(b, _reduce_to(gb, b.shape) if scalar_side == "b" else gb)

    return op_result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return op_result(-a.data, (a,), lambda g: accum_grad(a, -g))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return op_result(a.data * s, (a,), lambda g: accum_grad(a, g * s))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        accum_grad(a, g * out * (1.0 - out))

    return op_result(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        accum_grad(a, g * (1.0 - out * out))

    return op_result(out, (a,), backward)


_GELU_K0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_K1 = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Tanh-form gelu: 0.5*x*(1 + tanh(k0*(x + k1*x^3)))."""
    x = a.data
    inner = _GELU_K0 * (x + _GELU_K1 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_K0 * (1.0 + 3.0 * _GELU_K1 * x * x)
        accum_grad(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return op_result(out, (a,), backward)


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = x * sig

    def backward(g):
        accum_grad(a, g * sig * (1.0 + x * (1.0 - sig)))

    return op_result(out, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        accum_grad(a, g * sig)

    return op_result(out, (a,), backward)


def abs_(a: Tensor) -> Tensor:
    """|x| with subgradient 0 at x = 0."""
    out = np.abs(a.data)

    def backward(g):
        accum_grad(a, g * np.sign(a.data))

    return op_result(out, (a,), backward)


def sum_(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def backward(g):
        accum_grad(a, np.full_like(a.data, float(g)))

    return op_result(out, (a,), backward)


def mean_(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean())

    def backward(g):
        accum_grad(a, np.full_like(a.data, float(g) / n))

    return op_result(out, (a,), backward)


def elementwise(tag: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by tag; binary tags require b, scale requires a float b."""
    if tag == "add":
        return add(a, b)
    if tag == "sub":
        return sub(a, b)
    if tag == "mul":
        return mul(a, b)
    if tag == "sigmoid":
        return sigmoid(a)
    if tag == "tanh":
        return tanh(a)
    if tag == "gelu":
        return gelu(a)
    if tag == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise tag {tag!r}")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w (+ b). x is (N, d_in) or (d_in,); w is (d_in, d_out)."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear: {x.shape} @ {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        if x.data.ndim == 1:
            accum_grad(x, g @ w.data.T)
            accum_grad(w, np.outer(x.data, g))
            if b is not None:
                accum_grad(b, g)
        else:
            accum_grad(x, g @ w.data.T)
            accum_grad(w, x.data.T @ g)
            if b is not None:
                accum_grad(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return op_result(out, parents, backward)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0, bias: Optional[Tensor] = None) -> Tensor:
    """2D cross-correlation. x: (C_in, H, W); kernels: (C_out, C_in, k, k)."""
    cin, H, W = x.data.shape
    cout, cink, kh, kw = kernels.data.shape
    if cink != cin:
        raise ShapeError(f"conv2d channel mismatch: x has {cin}, kernels expect {cink}")
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ShapeError("conv2d: input smaller than kernel")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.einsum("ocab,cijab->oij", kernels.data, win, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def backward(g):
        if kernels.requires_grad:
            accum_grad(kernels, np.einsum("oij,cijab->ocab", g, win, optimize=True))
        if x.requires_grad:
            t = np.einsum("oij,ocab->cijab", g, kernels.data, optimize=True)
            gxp = np.zeros_like(xp)
            ho, wo = g.shape[1:]
            for a in range(kh):
                for b_ in range(kw):
                    gxp[:, a : a + stride * ho : stride, b_ : b_ + stride * wo : stride] += t[..., a, b_]
            accum_grad(x, gxp[:, pad : pad + H, pad : pad + W] if pad else gxp)
        if bias is not None and bias.requires_grad:
            accum_grad(bias, g.sum(axis=(1, 2)))

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return op_result(out, parents, backward)


def depthwise_conv2d(x: Tensor, kernels: Tensor, pad: int = 0, bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel 2D cross-correlation. kernels: (C, k, k)."""
    cin, H, W = x.data.shape
    ck, kh, kw = kernels.data.shape
    if ck != cin:
        raise ShapeError(f"depthwise_conv2d channel mismatch: {cin} vs {ck}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    out = np.einsum("cijab,cab->cij", win, kernels.data, optimize=True)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def backward(g):
        if kernels.requires_grad:
            accum_grad(kernels, np.einsum("cij,cijab->cab", g, win, optimize=True))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            ho, wo = g.shape[1:]
            for a in range(kh):
                for b_ in range(kw):
                    gxp[:, a : a + ho, b_ : b_ + wo] += g * kernels.data[:, a, b_][:, None, None]
            accum_grad(x, gxp[:, pad : pad + H, pad : pad + W] if pad else gxp)
        if bias is not None and bias.requires_grad:
            accum_grad(bias, g.sum(axis=(1, 2)))

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return op_result(out, parents, backward)


def causal_conv1d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Depthwise causal conv over the sequence axis. x: (N, d); w: (width, d).

    Output t depends on tokens t-width+1 .. t only (zero left padding).
    """
    N, d = x.data.shape
    width, dw = w.data.shape
    if dw != d:
        raise ShapeError(f"causal_conv1d channel mismatch: {d} vs {dw}")
    xp = np.concatenate([np.zeros((width - 1, d), dtype=x.data.dtype), x.data], axis=0)
    win = sliding_window_view(xp, width, axis=0)  # (N, d, width)
    out = np.einsum("ndw,wd->nd", win, w.data, optimize=True)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        if w.requires_grad:
            accum_grad(w, np.einsum("nd,ndw->wd", g, win, optimize=True))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for tau in range(width):
                gxp[tau : tau + N] += g * w.data[tau]
            accum_grad(x, gxp[width - 1 :])
        if bias is not None and bias.requires_grad:
            accum_grad(bias, g.sum(axis=0))

    parents = (x, w) if bias is None else (x, w, bias)
    return op_result(out, parents, backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token normalization over the last axis of (N, d) tokens."""
    if x.data.ndim != 2:
        raise ShapeError("layernorm expects (N, d) tokens")
    d = x.data.shape[1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError("layernorm affine params must have shape (d,)")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            accum_grad(gamma, (g * xhat).sum(axis=0))
        if beta.requires_grad:
            accum_grad(beta, g.sum(axis=0))
        if x.requires_grad:
            gxh = g * gamma.data
            gx = inv * (gxh - gxh.mean(axis=1, keepdims=True) - xhat * (gxh * xhat).mean(axis=1, keepdims=True))
            accum_grad(x, gx)

    return op_result(out, (x, gamma, beta), backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0 (the channel axis of planar images)."""
    base = parts[0].data.shape[1:]
    for p in parts[1:]:
        if p.data.shape[1:] != base:
            raise ShapeError("concat_channels: trailing dims differ")
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def backward(g):
        off = 0
        for p, n in zip(parts, sizes):
            accum_grad(p, g[off : off + n])
            off += n

    return op_result(out, tuple(parts), backward)


def narrow_channels(x: Tensor, start: int, length: int) -> Tensor:
    if start < 0 or start + length > x.data.shape[0]:
        raise ShapeError("narrow_channels out of range")
    out = x.data[start : start + length].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start : start + length] = g
        accum_grad(x, gx)

    return op_result(out, (x,), backward)


def channel_mean(x: Tensor) -> Tensor:
    """Global average pool of a (C, H, W) map to a (C,) vector."""
    C, H, W = x.data.shape
    out = x.data.mean(axis=(1, 2))

    def backward(g):
        accum_grad(x, np.broadcast_to(g[:, None, None] / (H * W), x.data.shape).copy())

    return op_result(out, (x,), backward)


def broadcast_channels(v: Tensor, h: int, w: int) -> Tensor:
    """Expand a (C,) vector to a constant (C, h, w) map."""
    if v.data.ndim != 1:
        raise ShapeError("broadcast_channels expects a vector")
    out = np.broadcast_to(v.data[:, None, None], (v.data.shape[0], h, w)).copy()

    def backward(g):
        accum_grad(v, g.sum(axis=(1, 2)))

    return op_result(out, (v,), backward)


# ---------------------------------------------------------------------------
# Parameter containers


class Module:
    """Lightweight parameter container with dotted-path naming.

    Attributes that are Parameters, Modules, or lists/tuples of either are
    discovered in definition order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            yield from _collect_params(path, val)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


def _collect_params(path: str, val) -> Iterator[tuple[str, Parameter]]:
    if isinstance(val, Parameter):
        yield path, val
    elif isinstance(val, Module):
        yield from val.named_parameters(path)
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _collect_params(f"{path}.{i}", item)


# ---------------------------------------------------------------------------
# Gradient verification against central finite differences


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    n_checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err < self.tol for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def __str__(self):
        lines = [f"{'param':40s} {'max_rel_err':>12s} {'coords':>7s}"]
        for e in self.entries:
            lines.append(f"{e.name:40s} {e.max_rel_err:12.3e} {e.n_checked:7d}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (tol {self.tol:g})")
        return "\n".join(lines)


def check_gradients(
    f: Callable[[], Tensor],
    params: Iterable[tuple[str, Parameter]],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar f() against central differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call. ``max_coords`` caps the number of coordinates probed per parameter
    (deterministically sampled); None probes every coordinate.
    """
    params = list(params)
    for _, p in params:
        p.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise ShapeError("check_gradients requires a scalar-valued graph")
    if not np.isfinite(loss.data):
        raise NonFiniteError("loss is non-finite")
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, p in params:
        n = p.data.size
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            coords = np.arange(n)
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        with no_grad():
            for idx in coords:
                orig = flat[idx]
                flat[idx] = orig + h
                fp = f().item()
                flat[idx] = orig - h
                fm = f().item()
                flat[idx] = orig
                num = (fp - fm) / (2.0 * h)
                a = a_flat[idx]
                denom = max(abs(a), abs(num), 1e-6)
                worst = max(worst, abs(a - num) / denom)
        report.entries.append(GradCheckEntry(name=name, max_rel_err=worst, n_checked=len(coords)))
    return report
