"""Minimal N-D tensor with reverse-mode differentiation.

Everything runs in double precision on numpy arrays.  Each operation builds
a node on an implicit tape (the parent links of the output tensor); calling
``backward()`` on a scalar result replays the tape in reverse topological
order and accumulates gradients into every tensor that requires them.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Refuse to propagate NaN/Inf: every op output is checked when this is on.
STRICT_FINITE = True

MAGIC = b"SATN"
FORMAT_VERSION = 1


class TensorError(ValueError):
    """Shape or domain violation in a tensor operation."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim > 4:
        raise TensorError(f"rank {arr.ndim} exceeds the supported maximum of 4")
    return arr


def _check_finite(arr: np.ndarray, what: str) -> None:
    if STRICT_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} produced non-finite values")


class Tensor:
    """N-D double array with an optional gradient buffer and tape links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        _check_finite(self.data, "tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from this tensor (seeded with ones)."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        if STRICT_FINITE:
            for node in topo:
                if node.grad is not None and not np.all(np.isfinite(node.grad)):
                    raise NonFiniteError("backward pass produced non-finite gradients")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor with a unique name path (e.g. "block2/layer3/conv/weight")."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[], None],
          what: str) -> Tensor:
    _check_finite(data, what)
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise TensorError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data + b.data
    out = None

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad)
        if b.requires_grad:
            b._accumulate(out.grad)

    out = _make(out_data, (a, b), backward, "add")
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = None

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * s)

    out = _make(a.data * s, (a,), backward, "scale")
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = None

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * mask)

    out = _make(np.where(mask, a.data, 0.0), (a,), backward, "relu")
    return out


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.maximum(x, 0))),
                 np.exp(np.minimum(x, 0)) / (1.0 + np.exp(np.minimum(x, 0))))
    out = None

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * y * (1.0 - y))

    out = _make(y, (a,), backward, "sigmoid")
    return out


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise TensorError(f"softmax axis {axis} invalid for rank {a.data.ndim}")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = None

    def backward():
        if a.requires_grad:
            g = out.grad
            a._accumulate(y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    out = _make(y, (a,), backward, "softmax")
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = None

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.shape))

    out = _make(a.data.reshape(shape), (a,), backward, "reshape")
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = None

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.transpose(inv))

    out = _make(a.data.transpose(axes), (a,), backward, "transpose")
    return out


def concat(inputs: Sequence[Tensor], axis: int) -> Tensor:
    if not inputs:
        raise TensorError("concat of an empty list")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if len(t.shape) != len(ref):
            raise TensorError("concat rank mismatch")
        for ax, (x, y) in enumerate(zip(t.shape, ref)):
            if ax != (axis % len(ref)) and x != y:
                raise TensorError(
                    f"concat extent mismatch on axis {ax}: {t.shape} vs {ref}")
    sizes = [t.shape[axis] for t in inputs]
    offsets = np.cumsum([0] + sizes)
    out = None

    def backward():
        for t, lo, hi in zip(inputs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(out.grad[tuple(idx)])

    out = _make(np.concatenate([t.data for t in inputs], axis=axis),
                tuple(inputs), backward, "concat")
    return out


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate B×C×H×W feature maps along the channel axis."""
    return concat(inputs, axis=1)


# ---------------------------------------------------------------------------
# matrix product

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 or batched rank-3 product; a 2-D operand broadcasts over batch."""
    if a.data.ndim not in (2, 3) or b.data.ndim not in (2, 3):
        raise TensorError("matmul expects rank-2 or rank-3 operands")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(
            f"matmul inner dimension mismatch: {a.shape} vs {b.shape}")
    if a.data.ndim == 3 and b.data.ndim == 3 and a.shape[0] != b.shape[0]:
        raise TensorError(f"matmul batch mismatch: {a.shape} vs {b.shape}")
    out = None

    def backward():
        g = out.grad
        if a.requires_grad:
            da = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if da.ndim > a.data.ndim:
                da = da.sum(axis=0)
            a._accumulate(da)
        if b.requires_grad:
            db = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if db.ndim > b.data.ndim:
                db = db.sum(axis=0)
            b._accumulate(db)

    out = _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x (B×F) @ weight (F×O) + bias (O)."""
    if x.shape[-1] != weight.shape[0]:
        raise TensorError(f"linear: {x.shape} incompatible with {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise TensorError("linear bias extent mismatch")
    out = None

    def backward():
        g = out.grad
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    out = _make(x.data @ weight.data + bias.data, (x, weight, bias),
                backward, "linear")
    return out


# ---------------------------------------------------------------------------
# convolution and pooling

def _conv_windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (B, C, OH, OW, k, k) view over the padded input
    w = sliding_window_view(x, (k, k), axis=(2, 3))
    return w[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW layout, square kernel."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise TensorError("conv2d expects 4-D input and weight")
    B, C, H, W = x.shape
    F, Cw, K, Kw = weight.shape
    if K != Kw:
        raise TensorError("conv2d kernel must be square")
    if C != Cw:
        raise TensorError(
            f"conv2d channel mismatch: input has {C}, weight expects {Cw}")
    if bias.shape != (F,):
        raise TensorError(f"conv2d bias extent {bias.shape} != ({F},)")
    if stride < 1 or padding < 0:
        raise TensorError("conv2d stride must be >=1 and padding >=0")
    if H + 2 * padding < K or W + 2 * padding < K:
        raise TensorError(
            f"conv2d kernel {K} does not fit padded input {H + 2 * padding}x{W + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _conv_windows(xp, K, stride)
    y = np.einsum("bcxyij,fcij->bfxy", win, weight.data, optimize=True)
    y += bias.data[None, :, None, None]
    OH, OW = y.shape[2], y.shape[3]
    out = None

    def backward():
        g = out.grad
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            weight._accumulate(
                np.einsum("bcxyij,bfxy->fcij", win, g, optimize=True))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(K):
                for j in range(K):
                    dxp[:, :, i:i + OH * stride:stride, j:j + OW * stride:stride] += \
                        np.einsum("bfxy,fc->bcxy", g, weight.data[:, :, i, j],
                                  optimize=True)
            if padding:
                dxp = dxp[:, :, padding:padding + H, padding:padding + W]
            x._accumulate(dxp)

    out = _make(y, (x, weight, bias), backward, "conv2d")
    return out


def avgpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    if x.data.ndim != 4:
        raise TensorError("avgpool2d expects a 4-D input")
    stride = window if stride is None else stride
    B, C, H, W = x.shape
    if window > H or window > W:
        raise TensorError(f"pool window {window} larger than input {H}x{W}")
    win = _conv_windows(x.data, window, stride)
    y = win.mean(axis=(4, 5))
    OH, OW = y.shape[2], y.shape[3]
    inv = 1.0 / (window * window)
    out = None

    def backward():
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            g = out.grad * inv
            for i in range(window):
                for j in range(window):
                    dx[:, :, i:i + OH * stride:stride, j:j + OW * stride:stride] += g
            x._accumulate(dx)

    out = _make(y, (x,), backward, "avgpool2d")
    return out


def global_avgpool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise TensorError("global_avgpool expects a 4-D input")
    B, C, H, W = x.shape
    y = x.data.mean(axis=(2, 3), keepdims=True)
    out = None

    def backward():
        if x.requires_grad:
            x._accumulate(np.broadcast_to(out.grad / (H * W), x.shape).copy())

    out = _make(y, (x,), backward, "global_avgpool")
    return out


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor spatial upsampling by an integer factor."""
    if x.data.ndim != 4:
        raise TensorError("upsample_nearest expects a 4-D input")
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    out = None

    def backward():
        if x.requires_grad:
            B, C, H, W = x.shape
            g = out.grad.reshape(B, C, H, factor, W, factor)
            x._accumulate(g.sum(axis=(3, 5)))

    out = _make(y, (x,), backward, "upsample_nearest")
    return out


# ---------------------------------------------------------------------------
# batch normalization

class BatchNormState:
    """Running mean/var for one batchnorm layer; None until first train step."""

    def __init__(self, channels: int):
        self.channels = channels
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None

    def initialized(self) -> bool:
        return self.running_mean is not None


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                train: bool, momentum: float = 0.1, epsilon: float = 1e-5) -> Tensor:
    if x.data.ndim != 4:
        raise TensorError("batchnorm2d expects a 4-D input")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise TensorError("batchnorm2d gamma/beta extent must equal channels")
    if state.channels != C:
        raise TensorError("batchnorm2d state channel mismatch")

    if train:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if state.running_mean is None:
            state.running_mean = mean.copy()
            state.running_var = var.copy()
        else:
            state.running_mean += momentum * (mean - state.running_mean)
            state.running_var += momentum * (var - state.running_var)
    else:
        if not state.initialized():
            raise TensorError("batchnorm2d eval before any training statistics")
        mean, var = state.running_mean, state.running_var

    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    out = None

    def backward():
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gs = g * gamma.data[None, :, None, None]
            if train:
                # full chain rule through the batch statistics
                m = x.shape[0] * x.shape[2] * x.shape[3]
                sum_gs = gs.sum(axis=(0, 2, 3), keepdims=True)
                sum_gs_xhat = (gs * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv_std[None, :, None, None] / m) * (
                    m * gs - sum_gs - xhat * sum_gs_xhat)
            else:
                dx = gs * inv_std[None, :, None, None]
            x._accumulate(dx)

    out = _make(y, (x, gamma, beta), backward, "batchnorm2d")
    return out


# ---------------------------------------------------------------------------
# reductions used by the loss

def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = None

    def backward():
        if x.requires_grad:
            x._accumulate(np.broadcast_to(out.grad / n, x.shape).copy())

    out = _make(np.array(x.data.mean()).reshape(()), (x,), backward, "mean_all")
    return out


# ---------------------------------------------------------------------------
# binary tensor serialization: magic "SATN", version u32, rank u32,
# extents u64[rank], raw little-endian doubles.

def write_tensor(buf, arr: np.ndarray) -> None:
    # note: ascontiguousarray would promote rank-0 arrays to rank 1
    arr = np.asarray(arr, dtype=np.float64)
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.astype("<f8", copy=False).tobytes())


def read_tensor(buf) -> np.ndarray:
    magic = buf.read(4)
    if magic != MAGIC:
        raise TensorError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", buf.read(8))
    if version != FORMAT_VERSION:
        raise TensorError(f"unsupported tensor format version {version}")
    shape = struct.unpack(f"<{rank}Q", buf.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buf.read(8 * count), dtype="<f8").astype(np.float64)
    return data.reshape(shape)


# ---------------------------------------------------------------------------
# initialization

def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for conv/linear weights."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
