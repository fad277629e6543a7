"""Rank-4 tensors, the operation tape, and differentiable kernels.

Every op takes and returns :class:`Tensor4` (batch, channels, height, width).
When a :class:`Tape` is active and any input requires a gradient, the op
appends a record holding its inputs and a vector-Jacobian product closure;
:func:`backward` replays those records in reverse.

    with Tape() as tape:
        loss = sum_all(ew_mul(a, a))
    backward(tape, loss)          # a.grad == 2 * a.data
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, TapeError

LAYER_NORM_EPS = 1e-6


class Tensor4:
    """Dense (batch, channels, height, width) array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 dimensions, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor4":
        return Tensor4(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor4{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor4:
    return x if isinstance(x, Tensor4) else Tensor4(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_ACTIVE: list = []


class Tape:
    """Ordered record of executed operations.

    Usable once: after :func:`backward` the records are released and any
    further backward call is rejected until a fresh forward pass is recorded
    on a new tape.
    """

    def __init__(self):
        self._records: list = []
        self._outputs: set = set()
        self.spent = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def produced(self, t: Tensor4) -> bool:
        return id(t) in self._outputs

    def backward(self, loss: Tensor4, params: Iterable[Tensor4] = ()) -> None:
        backward(self, loss, params)


def _record(out: Tensor4, inputs: Sequence[Tensor4], vjp: Callable) -> Tensor4:
    if not _ACTIVE or not any(t.requires_grad for t in inputs):
        return out
    tape = _ACTIVE[-1]
    if tape.spent:
        raise TapeError("tape was already consumed by backward; record on a new Tape")
    out.requires_grad = True
    tape._records.append((out, tuple(inputs), vjp))
    tape._outputs.add(id(out))
    return out


def backward(tape: Tape, loss: Tensor4, params: Iterable[Tensor4] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Leaves listed in ``params`` get a zero gradient buffer even when the loss
    does not depend on them.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a (1, 1, 1, 1) loss, got {loss.shape}")
    if tape.spent:
        raise TapeError("backward already ran on this tape; re-run the forward pass")
    if not tape.produced(loss):
        raise TapeError("loss tensor was not produced by this tape")
    for p in params:
        if p.grad is None:
            p.zero_grad()

    pending = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape._records):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in tape._outputs:
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
            elif t.grad is None:
                t.grad = np.array(gi, dtype=t.data.dtype)
            else:
                t.grad = t.grad + gi
    tape.spent = True
    tape._records.clear()


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------


@dataclass
class ConvKernel:
    """Weights (out, in, k, k) and bias (1, out, 1, 1) of a stride-1 convolution.

    Depthwise kernels hold one k x k filter per channel, weight shape
    (C, 1, k, k). Padding is always (k - 1) // 2, so spatial size is kept.
    """

    weight: Tensor4
    bias: Optional[Tensor4] = None
    depthwise: bool = False

    def __post_init__(self):
        o, i, kh, kw = self.weight.shape
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}")
        if self.depthwise and i != 1:
            raise ShapeError(f"depthwise weight must be (C, 1, k, k), got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (1, o, 1, 1):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {o} output channels")

    @property
    def size(self) -> int:
        return self.weight.shape[2]

    @property
    def padding(self) -> int:
        return (self.size - 1) // 2

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0] if self.depthwise else self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def named_parameters(self, prefix: str) -> list:
        out = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{prefix}.bias", self.bias))
        return out

    @classmethod
    def init(cls, out_channels: int, in_channels: int, size: int,
             rng: np.random.Generator, depthwise: bool = False, bias: bool = True,
             dtype=np.float64, gain: float = 1.0) -> "ConvKernel":
        """He-normal weights (variance 2 / fan_in, times gain**2), zero bias."""
        if size < 1 or size % 2 == 0:
            raise ShapeError(f"kernel size must be odd and >= 1, got {size}")
        if depthwise:
            if out_channels != in_channels:
                raise ShapeError("depthwise kernel needs out_channels == in_channels")
            shape, fan_in = (out_channels, 1, size, size), size * size
        else:
            shape, fan_in = (out_channels, in_channels, size, size), in_channels * size * size
        w = rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
        b = Tensor4(np.zeros((1, out_channels, 1, 1), dtype=dtype), requires_grad=True) if bias else None
        return cls(Tensor4(w, requires_grad=True), b, depthwise)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """(B, C, H+k-1, W+k-1) padded input -> (C*k*k, B*H*W) column matrix."""
    b, c = xp.shape[:2]
    if k == 1:
        return xp.transpose(1, 0, 2, 3).reshape(c, b * h * w)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (B, C, H, W, k, k)
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, b * h * w)


def _conv_cols(cols: np.ndarray, wm: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
    y = wm @ cols
    return np.ascontiguousarray(y.reshape(-1, b, h, w).transpose(1, 0, 2, 3))


def conv2d(x: Tensor4, kernel: ConvKernel) -> Tensor4:
    """Dense same-size convolution (cross-correlation, as in deep-learning usage)."""
    if kernel.depthwise:
        return dwconv2d(x, kernel)
    wt = kernel.weight
    o, c, k, _ = wt.shape
    if x.channels != c:
        raise ShapeError(f"conv2d: input shape {x.shape} does not match kernel shape {wt.shape}")
    b, _, h, w = x.shape
    p = kernel.padding
    cols = _im2col(_pad(x.data, p), k, h, w)
    wm = wt.data.reshape(o, c * k * k)
    y = _conv_cols(cols, wm, b, h, w)
    if kernel.bias is not None:
        y += kernel.bias.data
    out = Tensor4(y)

    def vjp(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, b * h * w)
        gw = (gm @ cols.T).reshape(wt.shape)
        gx = None
        if x.requires_grad:
            # input gradient = same-size convolution of g with the flipped, transposed kernel
            wflip = wt.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * k * k)
            gx = _conv_cols(_im2col(_pad(g, p), k, h, w), wflip, b, h, w)
        grads = [gx, gw]
        if kernel.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1))
        return grads

    return _record(out, [x] + kernel.parameters(), vjp)


def dwconv2d(x: Tensor4, kernel: ConvKernel) -> Tensor4:
    """Depthwise same-size convolution: one k x k filter per channel."""
    wt = kernel.weight
    c, _, k, _ = wt.shape
    if not kernel.depthwise or x.channels != c:
        raise ShapeError(f"dwconv2d: input shape {x.shape} does not match depthwise kernel {wt.shape}")
    b, _, h, w = x.shape
    p = kernel.padding
    xp = _pad(x.data, p)
    taps = wt.data[:, 0]
    y = np.zeros_like(x.data)
    for i in range(k):
        for j in range(k):
            y += xp[:, :, i:i + h, j:j + w] * taps[:, i, j].reshape(1, c, 1, 1)
    if kernel.bias is not None:
        y += kernel.bias.data
    out = Tensor4(y)

    def vjp(g):
        gw = np.empty_like(wt.data)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gw[:, 0, i, j] = (g * xp[:, :, i:i + h, j:j + w]).sum(axis=(0, 2, 3))
                gxp[:, :, i:i + h, j:j + w] += g * taps[:, i, j].reshape(1, c, 1, 1)
        grads = [gxp[:, :, p:p + h, p:p + w], gw]
        if kernel.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
        return grads

    return _record(out, [x] + kernel.parameters(), vjp)


# ---------------------------------------------------------------------------
# Normalization and activations
# ---------------------------------------------------------------------------


def _check_per_channel(x: Tensor4, p: Tensor4, what: str) -> None:
    if p.shape != (1, x.channels, 1, 1):
        raise ShapeError(f"{what} shape {p.shape} does not match input shape {x.shape}")


def layer_norm(x: Tensor4, gamma: Tensor4, beta: Tensor4, eps: float = LAYER_NORM_EPS) -> Tensor4:
    """Normalize across channels at every (batch, y, x) position, then scale and shift."""
    _check_per_channel(x, gamma, "gamma")
    _check_per_channel(x, beta, "beta")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = Tensor4(xhat * gamma.data + beta.data)

    def vjp(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return (gx,
                (g * xhat).sum(axis=(0, 2, 3), keepdims=True),
                g.sum(axis=(0, 2, 3), keepdims=True))

    return _record(out, [x, gamma, beta], vjp)


def prelu(x: Tensor4, alpha: Tensor4) -> Tensor4:
    _check_per_channel(x, alpha, "alpha")
    neg = x.data < 0
    out = Tensor4(np.where(neg, alpha.data * x.data, x.data))

    def vjp(g):
        gx = np.where(neg, g * alpha.data, g)
        ga = np.where(neg, g * x.data, 0.0).sum(axis=(0, 2, 3), keepdims=True)
        return gx, ga

    return _record(out, [x, alpha], vjp)


# ---------------------------------------------------------------------------
# Channel plumbing and elementwise ops
# ---------------------------------------------------------------------------


def channel_concat(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"channel_concat: cannot join shapes {a.shape} and {b.shape}")
    ca = a.channels
    out = Tensor4(np.concatenate([a.data, b.data], axis=1))
    return _record(out, [a, b], lambda g: (g[:, :ca], g[:, ca:]))


def channel_split(x: Tensor4, c: int):
    if not 0 < c < x.channels:
        raise ShapeError(f"channel_split: split point {c} outside (0, {x.channels}) for shape {x.shape}")
    first = Tensor4(x.data[:, :c].copy())
    second = Tensor4(x.data[:, c:].copy())

    def grad_into(lo, hi):
        def vjp(g):
            gx = np.zeros_like(x.data)
            gx[:, lo:hi] = g
            return (gx,)
        return vjp

    _record(first, [x], grad_into(0, c))
    _record(second, [x], grad_into(c, x.channels))
    return first, second


def _check_same(a: Tensor4, b: Tensor4, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape {a.shape} does not match shape {b.shape}")


def ew_add(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same(a, b, "ew_add")
    return _record(Tensor4(a.data + b.data), [a, b], lambda g: (g, g))


def ew_sub(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same(a, b, "ew_sub")
    return _record(Tensor4(a.data - b.data), [a, b], lambda g: (g, -g))


def ew_mul(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same(a, b, "ew_mul")
    return _record(Tensor4(a.data * b.data), [a, b], lambda g: (g * b.data, g * a.data))


def scale(x: Tensor4, c: float) -> Tensor4:
    return _record(Tensor4(x.data * c), [x], lambda g: (g * c,))


def paired_softmax(wa: Tensor4, wb: Tensor4):
    """Two-way softmax over a logit pair, elementwise.

    Returns (exp(wa) / (exp(wa) + exp(wb)), exp(wb) / (...)), evaluated after
    subtracting the pairwise maximum.
    """
    _check_same(wa, wb, "paired_softmax")
    m = np.maximum(wa.data, wb.data)
    ea = np.exp(wa.data - m)
    eb = np.exp(wb.data - m)
    s = ea + eb
    pa, pb = ea / s, eb / s
    out_a, out_b = Tensor4(pa), Tensor4(pb)
    papb = pa * pb
    # each output depends on both logits
    _record(out_a, [wa, wb], lambda g: (papb * g, -papb * g))
    _record(out_b, [wa, wb], lambda g: (-papb * g, papb * g))
    return out_a, out_b


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def downsample2x(x: Tensor4) -> Tensor4:
    """2 x 2 average pooling."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample2x needs even height and width, got {x.shape}")
    out = Tensor4(x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _record(out, [x], vjp)


def upsample_nearest2x(x: Tensor4) -> Tensor4:
    b, c, h, w = x.shape
    out = Tensor4(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def vjp(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(out, [x], vjp)


def upsample2x(x: Tensor4, kernel: ConvKernel) -> Tensor4:
    """Nearest-neighbour 2x upsampling followed by a learnable 1x1 convolution."""
    if kernel.size != 1:
        raise ShapeError(f"upsample2x expects a 1x1 kernel, got {kernel.size}x{kernel.size}")
    return conv2d(upsample_nearest2x(x), kernel)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum_all(x: Tensor4) -> Tensor4:
    out = Tensor4(np.full((1, 1, 1, 1), x.data.sum(), dtype=x.dtype))
    return _record(out, [x], lambda g: (np.broadcast_to(g.reshape(()), x.shape),))


def rms_diff(a: Tensor4, b: Tensor4) -> Tensor4:
    """sqrt(mean((a - b)^2)) as a (1, 1, 1, 1) tensor.

    The gradient at a zero residual is taken as 0 (the subgradient at the
    minimum).
    """
    _check_same(a, b, "rms_diff")
    r = a.data - b.data
    n = r.size
    val = float(np.sqrt((r * r).sum() / n))
    out = Tensor4(np.full((1, 1, 1, 1), val, dtype=a.dtype))

    def vjp(g):
        if val == 0.0:
            z = np.zeros_like(r)
            return z, z
        ga = r * (float(g.reshape(())) / (n * val))
        return ga, -ga

    return _record(out, [a, b], vjp)


def add_all(terms: Sequence[Tensor4]) -> Tensor4:
    """Sum of same-shaped tensors, left to right."""
    if not terms:
        raise ShapeError("add_all needs at least one term")
    total = terms[0]
    for t in terms[1:]:
        total = ew_add(total, t)
    return total
