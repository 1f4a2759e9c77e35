"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine covers exactly what the speaker-embedding architecture needs:
grouped dilated 1-D convolution with "same" zero padding, pointwise
arithmetic and activations, batch normalization, time-axis reductions,
channel concat/split, and a linear layer for the pooled head. Everything
runs in 64-bit floats; forward results are deterministic for fixed seeds.

Gradients are accumulated by walking the recorded graph in reverse
topological order. Calling ``backward`` twice accumulates unless grads
are cleared in between.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, LoadError, ShapeError

Array = np.ndarray

TENSOR_MAGIC = b"TNSR"


def _f64(values) -> Array:
    arr = np.asarray(values, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A float64 ndarray plus an optional same-shape gradient.

    ``requires_grad`` marks leaves that should receive gradients; derived
    tensors track it automatically. Tensors are treated as immutable after
    construction except for gradient accumulation (and optimizer updates
    on leaf parameters between graph builds).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f64(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)  # own the buffer
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar loss through the recorded graph."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        # stash prior grads so a repeated call accumulates rather than compounds
        stash = []
        for node in order:
            if node.grad is not None:
                stash.append((node, node.grad))
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node, old in stash:
            if node.grad is None:
                node.grad = old
            else:
                node.grad += old

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = _wrap(a)
    out_data = -a.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(-g)

    return _node(out_data, (a,), backward)


# -- activations --------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    # gradient at exactly 0 is defined as 0
    mask = a.data > 0.0
    out_data = np.where(mask, a.data, 0.0)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * mask)

    return _node(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _node(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _node(out_data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _node(out_data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; gradient is sigmoid(x)."""
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g: Array) -> None:
        if a.requires_grad:
            s = np.empty_like(x)
            pos = x >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            s[~pos] = ex / (1.0 + ex)
            a._accumulate(g * s)

    return _node(out_data, (a,), backward)


# -- reductions and shaping ---------------------------------------------------


def summation(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        gg = g if keepdims else np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _node(out_data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(summation(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _node(out_data, (a,), backward)


def concat_channels(xs: list[Tensor]) -> Tensor:
    """Concatenate along axis 1 (the channel axis); B and T must match."""
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    first = xs[0].shape
    for x in xs[1:]:
        if x.shape[:1] != first[:1] or x.shape[2:] != first[2:]:
            raise ShapeError(
                f"concat_channels: shape {x.shape} incompatible with {first}"
            )
    sizes = [x.shape[1] for x in xs]
    out_data = np.concatenate([x.data for x in xs], axis=1)

    def backward(g: Array) -> None:
        offset = 0
        for x, c in zip(xs, sizes):
            if x.requires_grad:
                x._accumulate(g[:, offset : offset + c])
            offset += c

    return _node(out_data, tuple(xs), backward)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    out_data = a.data[:, start:stop].copy()

    def backward(g: Array) -> None:
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[:, start:stop] += g

    return _node(out_data, (a,), backward)


def split_channels(a: Tensor, sizes: list[int]) -> list[Tensor]:
    """Inverse of concat_channels; gradients route back to the source slices."""
    if sum(sizes) != a.shape[1]:
        raise ShapeError(
            f"split_channels: sizes {sizes} do not sum to channel count {a.shape[1]}"
        )
    pieces = []
    offset = 0
    for s in sizes:
        pieces.append(slice_channels(a, offset, offset + s))
        offset += s
    return pieces


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[B,D] @ w[O,D]^T (+ b[O]) -> [B,O]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: x {x.shape} incompatible with w {w.shape}")
    out_data = x.data @ w.data.T
    if b is not None:
        out_data = out_data + b.data

    parents = (x, w) if b is None else (x, w, b)

    def backward(g: Array) -> None:
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _node(out_data, parents, backward)


# -- grouped dilated conv1d ---------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 1-D convolution over [B, C, T] tensors.

    "Same" zero padding is the only supported mode, so the time extent is
    preserved. ``groups`` partitions both channel sets: output group j
    reads only input group j.
    """

    in_channels: int
    out_channels: int
    kernel_size: int
    dilation: int = 1
    groups: int = 1
    padding: str = "same"

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_size", "dilation", "groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ConvSpec.{name} must be positive")
        if self.padding != "same":
            raise ConfigError(f"ConvSpec.padding must be 'same', got {self.padding!r}")
        if self.kernel_size % 2 != 1:
            raise ConfigError(
                f"ConvSpec.kernel_size must be odd for symmetric same padding, "
                f"got {self.kernel_size}"
            )
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def span(self) -> int:
        """Effective kernel span d*(k-1)+1."""
        return self.dilation * (self.kernel_size - 1) + 1

    @property
    def weight_shape(self) -> tuple[int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_size)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    """Grouped dilated conv over time with zero "same" padding.

    x: [B, Cin, T]; w: [Cout, Cin/groups, k]; b: [Cout] or None -> [B, Cout, T].
    """
    if x.data.ndim != 3 or x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv1d: input shape {x.shape} does not match spec "
            f"(expected [B, {spec.in_channels}, T])"
        )
    if w.shape != spec.weight_shape:
        raise ShapeError(
            f"conv1d: weight shape {w.shape} does not match spec "
            f"(expected {spec.weight_shape})"
        )
    if b is not None and b.shape != (spec.out_channels,):
        raise ShapeError(
            f"conv1d: bias shape {b.shape} expected ({spec.out_channels},)"
        )

    B, Cin, T = x.shape
    g = spec.groups
    k = spec.kernel_size
    d = spec.dilation
    cin_g = Cin // g
    cout_g = spec.out_channels // g

    # [g, Cout/g, Cin/g * k] view of the weights (no copy)
    w_mat = w.data.reshape(g, cout_g, cin_g, k).reshape(g, cout_g, cin_g * k)

    if k == 1:
        cols = x.data.reshape(B, g, cin_g, T)  # taps == the input itself
    else:
        pad = (spec.span - 1) // 2
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
        # windows[b, c, t, j] = xp[b, c, t + d*j]
        windows = np.lib.stride_tricks.sliding_window_view(xp, spec.span, axis=2)
        windows = windows[:, :, :, ::d]  # [B, Cin, T, k]
        cols = np.ascontiguousarray(np.swapaxes(windows, 2, 3))  # [B, Cin, k, T]
        cols = cols.reshape(B, g, cin_g * k, T)

    if k == 1:
        out_data = np.matmul(w_mat, cols)  # [B, g, Cout/g, T]
    else:
        out_data = np.matmul(w_mat, cols)
    out_data = out_data.reshape(B, spec.out_channels, T)
    if b is not None:
        out_data = out_data + b.data[:, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g_out: Array) -> None:
        go = g_out.reshape(B, g, cout_g, T)
        if w.requires_grad:
            base = x.data.reshape(B, g, cin_g, T) if k == 1 else cols
            gw = np.matmul(go, np.swapaxes(base, 2, 3)).sum(axis=0)  # [g, Cout/g, Cin/g*k]
            w._accumulate(gw.reshape(spec.weight_shape))
        if x.requires_grad:
            # cols-space gradient, then scatter the taps back over time
            gcols = np.matmul(np.swapaxes(w_mat, 1, 2), go)  # [B, g, Cin/g*k, T]
            if k == 1:
                x._accumulate(gcols.reshape(B, Cin, T))
            else:
                pad = (spec.span - 1) // 2
                gx = np.zeros((B, Cin, T + 2 * pad))
                gck = gcols.reshape(B, Cin, k, T)
                for j in range(k):
                    gx[:, :, j * d : j * d + T] += gck[:, :, j]
                x._accumulate(gx[:, :, pad : pad + T])
        if b is not None and b.requires_grad:
            b._accumulate(g_out.sum(axis=(0, 2)))

    return _node(out_data, parents, backward)


# -- batch normalization ------------------------------------------------------


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Array,
    running_var: Array,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of [B, C, T] over the (B, T) axes.

    Train mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance, momentum 0.1). Eval mode applies
    the running statistics; freshly initialized buffers (mean 0, var 1)
    make it a near-identity.
    """
    C = gamma.shape[0]
    if x.data.ndim != 3 or x.shape[1] != C:
        raise ShapeError(
            f"batchnorm1d: input {x.shape} does not match parameter length {C}"
        )
    n = x.shape[0] * x.shape[2]
    if training:
        mu = x.data.mean(axis=(0, 2), keepdims=True)  # [1, C, 1]
        var = ((x.data - mu) ** 2).mean(axis=(0, 2), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C)
        unbiased = var.reshape(C) * (n / (n - 1.0)) if n > 1 else var.reshape(C)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.reshape(1, C, 1)
        inv = 1.0 / np.sqrt(running_var.reshape(1, C, 1) + eps)
    xhat = (x.data - mu) * inv
    out_data = gamma.data[:, None] * xhat + beta.data[:, None]

    def backward(g: Array) -> None:
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gx = g * gamma.data[:, None]
            if training:
                # normalize through the batch statistics
                m1 = gx.mean(axis=(0, 2), keepdims=True)
                m2 = (gx * xhat).mean(axis=(0, 2), keepdims=True)
                x._accumulate(inv * (gx - m1 - xhat * m2))
            else:
                x._accumulate(inv * gx)

    return _node(out_data, (x, gamma, beta), backward)


# -- weighted time reductions -------------------------------------------------


def _check_weights(w: Tensor, T: int) -> None:
    if np.any(w.data < 0):
        raise ContractError("time weights must be nonnegative")
    sums = w.data.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        worst = float(np.abs(sums - 1.0).max())
        raise ContractError(
            f"time weights must sum to 1 over T (max deviation {worst:.3e})"
        )


def mean_over_time(x: Tensor) -> Tensor:
    """[B, C, T] -> [B, C] plain average over the time axis."""
    if x.data.ndim != 3:
        raise ShapeError(f"mean_over_time: expected [B, C, T], got {x.shape}")
    return mean(x, axis=2)


def weighted_mean(x: Tensor, wts: Tensor) -> Tensor:
    """Weighted time average with weights [B, 1|C, T] summing to 1 over T."""
    if x.data.ndim != 3 or wts.data.ndim != 3:
        raise ShapeError(f"weighted_mean: got shapes {x.shape}, {wts.shape}")
    if wts.shape[1] not in (1, x.shape[1]) or wts.shape[2] != x.shape[2]:
        raise ShapeError(
            f"weighted_mean: weights {wts.shape} incompatible with input {x.shape}"
        )
    _check_weights(wts, x.shape[2])
    return summation(mul(x, wts), axis=2)


def weighted_std(x: Tensor, wts: Tensor, eps: float = 1e-9) -> Tensor:
    """sqrt(E_w[x^2] - E_w[x]^2 + eps) with the variance clamped at 0."""
    m = weighted_mean(x, wts)
    m2 = weighted_mean(mul(x, x), wts)
    var = relu(sub(m2, mul(m, m)))  # clamp negative round-off at 0
    return sqrt(add(var, eps))


def std_over_time(x: Tensor, eps: float = 1e-9) -> Tensor:
    """Unweighted counterpart of weighted_std over the time axis."""
    m = mean(x, axis=2)
    m2 = mean(mul(x, x), axis=2)
    var = relu(sub(m2, mul(m, m)))
    return sqrt(add(var, eps))


def softmax_over_time(a: Tensor) -> Tensor:
    """Softmax along the last axis of [B, C, T], stabilized by a constant shift."""
    shift = Tensor(a.data.max(axis=-1, keepdims=True))  # constant, no grad
    e = exp(sub(a, shift))
    return div(e, summation(e, axis=-1, keepdims=True))


def logsumexp(a: Tensor, mask: Array | None = None, axis: int = -1) -> Tensor:
    """log(sum(exp(a) * mask)) along ``axis``, stabilized by a constant shift.

    ``mask`` is a constant 0/1 array excluding terms from the sum.
    """
    if mask is not None:
        shifted_max = np.where(mask > 0, a.data, -np.inf).max(axis=axis, keepdims=True)
    else:
        shifted_max = a.data.max(axis=axis, keepdims=True)
    shift = Tensor(shifted_max)
    e = exp(sub(a, shift))
    if mask is not None:
        e = mul(e, Tensor(mask))
    return add(log(summation(e, axis=axis, keepdims=True)), shift)


# -- serialization ------------------------------------------------------------


def tensor_to_bytes(t: Tensor) -> bytes:
    """Little-endian: magic "TNSR", u32 rank, u64 extents, f64 payload."""
    header = TENSOR_MAGIC + struct.pack("<I", t.data.ndim)
    header += struct.pack(f"<{t.data.ndim}Q", *t.shape)
    return header + t.data.astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one serialized tensor; returns (tensor, next offset)."""
    if len(buf) < offset + 8:
        raise LoadError("tensor header truncated")
    magic = buf[offset : offset + 4]
    if magic != TENSOR_MAGIC:
        raise LoadError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) < pos + 8 * rank:
        raise LoadError("tensor extents truncated")
    extents = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(extents)) if rank else 1
    nbytes = 8 * count
    if len(buf) < pos + nbytes:
        raise LoadError("tensor payload truncated")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(extents)
    return Tensor(data.astype(np.float64)), pos + nbytes


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise LoadError(f"trailing {len(buf) - end} bytes after tensor payload")
    return t
