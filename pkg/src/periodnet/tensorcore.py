"""Dense numpy tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Graph` (a
thread-local stack), but only when at least one input requires a gradient.
Outside any graph everything runs as plain numpy, which is what synthesis
uses.

    with Graph() as g:
        y = conv1d(x, w, b, dilation=2)
        loss = sum(y * y)
    g.backward(loss)
    w.grad
"""

from __future__ import annotations

import builtins
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, NumericError, ShapeError

MAG_EPS = 1e-7

_local = threading.local()


def _graph_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_graph() -> Graph | None:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_graph", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, check: bool = True):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if check and not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._graph: Graph | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, check=False)

    def backward(self, inputs: Iterable[Tensor] | None = None) -> None:
        if self._graph is None:
            raise GraphError("tensor was not produced by a recorded graph")
        self._graph.backward(self, inputs)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)


class Graph:
    """Ordered tape of executed operations; supports exactly one backward sweep."""

    def __init__(self) -> None:
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> Graph:
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _append(self, out: Tensor, parents: tuple, fn: Callable) -> None:
        if self._consumed:
            raise GraphError("graph already swept backward; record into a new Graph")
        out._graph = self
        self._nodes.append((out, parents, fn))

    def backward(self, loss: Tensor, inputs: Iterable[Tensor] | None = None) -> None:
        """Populate ``.grad`` on every leaf that requires a gradient.

        Leaves listed in ``inputs`` that the loss does not depend on get a
        zero gradient.
        """
        if self._consumed:
            raise GraphError("backward already called on this graph")
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NumericError(f"loss is not finite: {loss.data}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        seed = np.ones_like(loss.data)
        if loss._graph is self:
            grads[id(loss)] = seed
        elif loss.requires_grad:
            leaves[id(loss)] = (loss, seed)

        for out, parents, fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, gp in zip(parents, fn(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                if p._graph is self:
                    grads[key] = grads[key] + gp if key in grads else gp
                elif key in leaves:
                    leaves[key] = (p, leaves[key][1] + gp)
                else:
                    leaves[key] = (p, gp)
        self._nodes = []

        for t, g in leaves.values():
            t.grad = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
        if inputs is not None:
            for t in inputs:
                if id(t) not in leaves:
                    t.grad = np.zeros_like(t.data)


def backward(graph: Graph, loss: Tensor, inputs: Iterable[Tensor] | None = None) -> None:
    graph.backward(loss, inputs)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=np.float64), check=False)
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: tuple, fn: Callable) -> Tensor:
    out = Tensor(data, check=False)
    g = current_graph()
    if g is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        g._append(out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary_dtype(a: Tensor, b: Tensor) -> tuple[np.ndarray, np.ndarray]:
    # scalars adopt the tensor's precision instead of promoting float32 to float64
    ad, bd = a.data, b.data
    if ad.dtype != bd.dtype:
        if bd.ndim == 0 and (ad.ndim > 0 or bd.dtype == np.float64):
            bd = bd.astype(ad.dtype)
        elif ad.ndim == 0:
            ad = ad.astype(bd.dtype)
    return ad, bd


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = _binary_dtype(a, b)

    def fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(ad + bd, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = _binary_dtype(a, b)

    def fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(ad - bd, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = _binary_dtype(a, b)

    def fn(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = _binary_dtype(a, b)
    out = ad / bd

    def fn(g):
        return (_unbroadcast(g / bd, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), fn)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (0.5 * g / y,))


def abs(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clamp_min(x, lo: float) -> Tensor:
    x = as_tensor(x)
    keep = x.data > lo
    return _make(np.where(keep, x.data, lo).astype(x.dtype), (x,), lambda g: (g * keep,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid_np(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make(x.data * pos, (x,), lambda g: (g * pos,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky slope must be in [0, 1), got {slope}")
    x = as_tensor(x)
    scale = np.where(x.data >= 0, 1.0, slope).astype(x.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def gated_activation(a, b) -> Tensor:
    """tanh(a) * sigmoid(b)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"gate halves differ in shape: {a.shape} vs {b.shape}")
    ta = np.tanh(a.data)
    sb = _sigmoid_np(b.data)
    out = ta * sb

    def fn(g):
        return (g * sb * (1.0 - ta * ta) if a.requires_grad else None,
                g * out * (1.0 - sb) if b.requires_grad else None)

    return _make(out, (a, b), fn)


# -- reductions and shape ops --------------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def norm(x) -> Tensor:
    """Frobenius norm over all elements; gradient taken as zero at the origin."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data))

    def fn(g):
        return (g * x.data / n if n > 0 else np.zeros_like(x.data),)

    return _make(n, (x,), fn)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x, idx) -> Tensor:
    """Basic (slice/integer) indexing only."""
    x = as_tensor(x)

    def fn(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def fn(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, ts))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, fn)


# -- network primitives --------------------------------------------------------


def conv1d(x, weight, bias=None, dilation: int = 1, pad: str = "same") -> Tensor:
    """1-D cross-correlation over the last axis.

    ``x`` is ``(C_in, T)`` or ``(B, C_in, T)``; ``weight`` is ``(C_out, C_in, K)``.
    ``pad`` is ``"same"`` (non-causal, odd K), ``"causal"`` or ``"none"``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")
    if weight.ndim != 3:
        raise ShapeError(f"weight must be (C_out, C_in, K), got {weight.shape}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeError(f"input must be (C, T) or (B, C, T), got {x.shape}")
    B, cin, T = xd.shape
    cout, cin_w, K = weight.shape
    if cin != cin_w:
        raise ShapeError(f"input has {cin} channels, weight expects {cin_w}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    span = (K - 1) * dilation
    if pad == "same":
        if K % 2 == 0:
            raise ShapeError("same padding needs an odd kernel")
        left = right = span // 2
    elif pad == "causal":
        left, right = span, 0
    elif pad == "none":
        left = right = 0
    else:
        raise ValueError(f"unknown padding mode {pad!r}")
    xp = np.pad(xd, ((0, 0), (0, 0), (left, right))) if span else xd
    t_out = xp.shape[2] - span
    if t_out < 1:
        raise ShapeError(f"input length {T} shorter than kernel span {span + 1}")
    if K == 1:
        cols = xp
    else:
        cols = np.stack([xp[:, :, k * dilation:k * dilation + t_out] for k in range(K)], axis=2)
        cols = cols.reshape(B, cin * K, t_out)
    w2 = weight.data.reshape(cout, cin * K)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    if squeeze:
        out = out[0]

    def fn(g):
        if squeeze:
            g = g[None]
        gx = gw = gb = None
        if weight.requires_grad:
            if B == 1:
                gw = g[0] @ cols[0].T
            else:
                gw = np.tensordot(g, cols, axes=([0, 2], [0, 2]))
            gw = gw.reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g)
            if K == 1:
                gxp = gcols
            else:
                gcols = gcols.reshape(B, cin, K, t_out)
                gxp = np.zeros(xp.shape, dtype=gcols.dtype)
                for k in range(K):
                    gxp[:, :, k * dilation:k * dilation + t_out] += gcols[:, :, k]
            gx = gxp[:, :, left:left + T]
            if squeeze:
                gx = gx[0]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return _make(out, parents, lambda g: fn(g)[:2])
    return _make(out, parents, fn)


def weight_norm(v, g) -> Tensor:
    """w = g * v / ||v|| with the norm taken per output channel (axis 0)."""
    v, g = as_tensor(v), as_tensor(g)
    if g.shape != (v.shape[0],):
        raise ShapeError(f"gain shape {g.shape} != ({v.shape[0]},)")
    axes = tuple(range(1, v.ndim))
    bshape = (-1,) + (1,) * (v.ndim - 1)
    norm = np.sqrt(np.sum(v.data * v.data, axis=axes))
    if np.any(norm == 0):
        raise ShapeError("weight_norm: zero-norm output channel")
    unit = v.data / norm.reshape(bshape)
    out = unit * g.data.reshape(bshape)

    def fn(gw):
        proj = np.sum(gw * unit, axis=axes)
        gv = gg = None
        if v.requires_grad:
            gv = (g.data / norm).reshape(bshape) * (gw - unit * proj.reshape(bshape))
        if g.requires_grad:
            gg = proj
        return gv, gg

    return _make(out, (v, g), fn)


def avg_pool1d(x, k: int) -> Tensor:
    """Non-overlapping mean over windows of ``k`` along the last axis; tail dropped."""
    if k < 1:
        raise ValueError(f"pool size must be >= 1, got {k}")
    x = as_tensor(x)
    if k == 1:
        return x
    T = x.shape[-1]
    n = T // k
    lead = x.shape[:-1]
    out = x.data[..., :n * k].reshape(lead + (n, k)).mean(axis=-1)

    def fn(g):
        full = np.zeros_like(x.data)
        full[..., :n * k] = np.repeat(g / k, k, axis=-1)
        return (full,)

    return _make(out, (x,), fn)


def hann_window(length: int, dtype=np.float64) -> np.ndarray:
    """Periodic Hann window (the DFT-even variant used for spectral analysis)."""
    n = np.arange(length)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)).astype(dtype)


def stft_magnitude(x, fft_size: int, hop: int, win_length: int, eps: float = MAG_EPS) -> Tensor:
    """Hann-windowed magnitude spectrogram, centered frames with reflection padding.

    ``x`` is ``(T,)`` or ``(B, T)``; the result is ``(F, N)`` or ``(B, F, N)``
    with ``F = fft_size // 2 + 1`` and ``N = 1 + T // hop``. Magnitudes are
    clamped below at ``eps`` (gradient zero where clamped).
    """
    if win_length > fft_size:
        raise ShapeError(f"window {win_length} longer than FFT {fft_size}")
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    if fft_size % 2:
        raise ShapeError("fft_size must be even")
    x = as_tensor(x)
    squeeze = x.ndim == 1
    xd = x.data[None] if squeeze else x.data
    T = xd.shape[-1]
    if T == 0:
        raise ShapeError("empty signal")
    pad = fft_size // 2
    if T <= pad:
        raise ShapeError(f"signal of {T} samples too short for reflection padding of {pad}")
    xp = np.pad(xd, ((0, 0), (pad, pad)), mode="reflect")
    win = np.zeros(fft_size, dtype=xd.dtype)
    off = (fft_size - win_length) // 2
    win[off:off + win_length] = hann_window(win_length, xd.dtype)
    frames = np.lib.stride_tricks.sliding_window_view(xp, fft_size, axis=-1)[:, ::hop]
    n_frames = frames.shape[1]
    spec = np.fft.rfft(frames * win, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    live = power > eps * eps
    mag = np.sqrt(np.where(live, power, eps * eps)).astype(xd.dtype)
    out = np.swapaxes(mag, -1, -2)
    if squeeze:
        out = out[0]

    def fn(g):
        if squeeze:
            g = g[None]
        g = np.swapaxes(g, -1, -2)
        coef = np.where(live, g / mag, 0.0) * spec
        coef[..., 1:-1] *= 0.5
        gframes = np.fft.irfft(coef, n=fft_size, axis=-1) * fft_size * win
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(n_frames):
            gxp[:, i * hop:i * hop + fft_size] += gframes[:, i]
        gx = gxp[:, pad:pad + T].copy()
        gx[:, 1:pad + 1] += gxp[:, :pad][:, ::-1]
        gx[:, T - 1 - pad:T - 1] += gxp[:, pad + T:][:, ::-1]
        return (gx[0] if squeeze else gx,)

    return _make(out, (x,), fn)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return builtins.all(np.isfinite(t.data).all() for t in tensors)
