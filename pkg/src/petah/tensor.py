"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a read-only numpy array (float32 by default, float64
for gradient checking).  Operations are plain functions; while a :class:`Tape`
is active, every operation that consumes a watched tensor (or a value derived
from one) appends a record holding its vector-Jacobian product.  Calling
:func:`backward` replays those records in reverse.

    >>> w = Tensor([[1.0, 2.0]], name="w")
    >>> with Tape() as tape:
    ...     tape.watch(w)
    ...     loss = sum_(mul(w, w))
    >>> backward(tape, loss)["w"].data
    array([[2., 4.]], dtype=float32)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up at an operation boundary."""


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable dense array of real scalars.

    ``data`` is row-major and read-only; parameter updates replace the whole
    tensor rather than writing into it.
    """

    __slots__ = ("_data", "name")

    def __init__(self, data, dtype=None, name: str | None = None, op: str = "tensor"):
        if isinstance(data, Tensor):
            data = data._data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value produced by {op}")
        arr.flags.writeable = False
        self._data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str) -> "Tensor":
        # internal constructor for freshly computed arrays: no defensive copy
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value produced by {op}")
        arr.flags.writeable = False
        t._data = arr
        t.name = None
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else _raise_not_scalar()

    def astype(self, dtype) -> "Tensor":
        return Tensor(self._data, dtype=dtype, name=self.name)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self, tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2))


def _raise_not_scalar():
    raise ShapeError("item() needs a single-element tensor")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable
    needs: tuple


class Tape:
    """Ordered log of differentiable operations.

    Only work reachable from watched tensors is recorded, so frozen backbone
    computations cost nothing on the backward pass.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.watched: dict[str, Tensor] = {}
        self._tracked: dict[int, Tensor] = {}

    def watch(self, tensors) -> None:
        if isinstance(tensors, Tensor):
            tensors = {tensors.name or f"_{len(self.watched)}": tensors}
        elif not isinstance(tensors, Mapping):
            tensors = {t.name or f"_{len(self.watched) + i}": t for i, t in enumerate(tensors)}
        for name, t in tensors.items():
            self.watched[name] = t
            self._tracked[id(t)] = t

    def tracks(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._tracked

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def _record(op: str, inputs: Sequence, out: Tensor, vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return out
    needs = tuple(tape.tracks(t) for t in inputs)
    if any(needs):
        tape.records.append(_Record(op, tuple(inputs), out, vjp, needs))
        tape._tracked[id(out)] = out
    return out


def backward(tape: Tape, loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
    """Gradient of a scalar ``loss`` with respect to each watched tensor.

    Watched tensors that the loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    targets = dict(params) if params is not None else dict(tape.watched)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.vjp(g, rec.needs)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not tape.tracks(inp):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out = {}
    for name, t in targets.items():
        g = grads.get(id(t))
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
        out[name] = Tensor._wrap(np.asarray(g, dtype=t.dtype).reshape(t.shape), "backward")
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = Tensor._wrap(a.data + b.data, "add")

    def vjp(g, needs):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = Tensor._wrap(a.data - b.data, "sub")

    def vjp(g, needs):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = Tensor._wrap(a.data * b.data, "mul")

    def vjp(g, needs):
        ga = _unbroadcast(g * b.data, a.shape) if needs[0] else None
        gb = _unbroadcast(g * a.data, b.shape) if needs[1] else None
        return ga, gb

    return _record("mul", (a, b), out, vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor._wrap(a.data * a.dtype.type(c), "scale")
    return _record("scale", (a,), out, lambda g, needs: (g * a.dtype.type(c),))


def relu(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(a.data, 0), "relu")
    return _record("relu", (a,), out, lambda g, needs: (g * (a.data > 0),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    t = np.tanh(c * (x + k * x * x * x))
    out = Tensor._wrap(0.5 * x * (1 + t), "gelu")

    def vjp(g, needs):
        d = 0.5 * (1 + t) + 0.5 * x * (1 - t * t) * c * (1 + 3 * k * x * x)
        return (g * d,)

    return _record("gelu", (a,), out, vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._wrap(s, "softmax")

    def vjp(g, needs):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (a,), out, vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_arr = z - lse
    out = Tensor._wrap(out_arr, "log_softmax")

    def vjp(g, needs):
        return (g - np.exp(out_arr) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (a,), out, vjp)


def layer_norm(x: Tensor, weight: Tensor | None, bias: Tensor | None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an optional affine map."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = xc * rstd
    y = xhat
    if weight is not None:
        y = y * weight.data
    if bias is not None:
        y = y + bias.data
    out = Tensor._wrap(y, "layer_norm")
    inputs = (x,) + tuple(t for t in (weight, bias) if t is not None)

    def vjp(g, needs):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * weight.data if weight is not None else g
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _record("layer_norm", inputs, out, vjp)


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        arr = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    out = Tensor._wrap(arr, "reshape")
    return _record("reshape", (a,), out, lambda g, needs: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor._wrap(a.data.transpose(axes), "transpose")
    return _record("transpose", (a,), out, lambda g, needs: (g.transpose(inv),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor._wrap(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum")

    def vjp(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), out, vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = Tensor._wrap(np.matmul(a.data, b.data), "matmul")

    def vjp(g, needs):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if needs[0] else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if needs[1] else None
        return ga, gb

    return _record("matmul", (a, b), out, vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy for integer class labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy expects N x K logits and N labels")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    logp = z - np.log(se)
    loss = -logp[np.arange(n), labels].mean()
    out = Tensor._wrap(np.asarray(loss, dtype=logits.dtype), "cross_entropy")

    def vjp(g, needs):
        p = e / se
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return _record("cross_entropy", (logits,), out, vjp)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # N, C, Ho, Wo, k, k view
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _col2im(dwin: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # dwin: N, C, Ho, Wo, k, k; fixed accumulation order over kernel offsets
    dxp = np.zeros(shape, dtype=dwin.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dwin[..., i, j]
    return dxp


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation of an N x q x H x W batch with a p x (q/g) x k x k kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError("stride must be >= 1, padding >= 0, groups >= 1")
    n, q, h, w = x.shape
    p, qg, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError("only square kernels are supported")
    k = kh
    if q % groups or p % groups:
        raise ShapeError(f"channels ({q} in, {p} out) not divisible by groups={groups}")
    if qg != q // groups:
        raise ShapeError(f"kernel expects {qg * groups} input channels, input has {q}")
    if bias is not None and bias.shape != (p,):
        raise ShapeError(f"bias shape {bias.shape} does not match {p} output channels")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"non-positive output extent {ho}x{wo}")

    xp = _pad(x.data, padding)
    win = _windows(xp, k, stride, ho, wo)
    pg = p // groups
    m = n * ho * wo
    cols = []
    out = np.empty((n, ho, wo, p), dtype=np.result_type(x.dtype, kernel.dtype))
    for gi in range(groups):
        cg = win[:, gi * qg : (gi + 1) * qg].transpose(0, 2, 3, 1, 4, 5).reshape(m, qg * k * k)
        wg = kernel.data[gi * pg : (gi + 1) * pg].reshape(pg, -1)
        out[..., gi * pg : (gi + 1) * pg] = (cg @ wg.T).reshape(n, ho, wo, pg)
        cols.append(cg)
    if bias is not None:
        out += bias.data
    result = Tensor._wrap(out.transpose(0, 3, 1, 2), "conv2d")

    def vjp(g, needs):
        g2 = g.transpose(0, 2, 3, 1).reshape(m, p)
        dx = dk = None
        if needs[1]:
            dk = np.empty_like(kernel.data)
            for gi in range(groups):
                gg = g2[:, gi * pg : (gi + 1) * pg]
                dk[gi * pg : (gi + 1) * pg] = (gg.T @ cols[gi]).reshape(pg, qg, k, k)
        if needs[0]:
            dwin = np.empty((n, ho, wo, q, k, k), dtype=g.dtype)
            for gi in range(groups):
                gg = g2[:, gi * pg : (gi + 1) * pg]
                wg = kernel.data[gi * pg : (gi + 1) * pg].reshape(pg, -1)
                dwin[:, :, :, gi * qg : (gi + 1) * qg] = (gg @ wg).reshape(n, ho, wo, qg, k, k)
            dxp = _col2im(dwin.transpose(0, 3, 1, 2, 4, 5), xp.shape, k, stride, ho, wo)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, kernel) + ((bias,) if bias is not None else ())
    return _record("conv2d", inputs, result, vjp)


def avg_pool2d(x: Tensor, k: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Average pooling; padded positions are excluded from the window count."""
    stride = stride or k
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"non-positive output extent {ho}x{wo}")
    xp = _pad(x.data, padding)
    ones = _pad(np.ones((1, 1, h, w), dtype=x.dtype), padding)
    counts = _windows(ones, k, stride, ho, wo).sum(axis=(-2, -1))
    out = Tensor._wrap(_windows(xp, k, stride, ho, wo).sum(axis=(-2, -1)) / counts, "avg_pool2d")

    def vjp(g, needs):
        gc = g / counts
        dwin = np.broadcast_to(gc[..., None, None], (n, c, ho, wo, k, k))
        dxp = _col2im(dwin, xp.shape, k, stride, ho, wo)
        return (dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp,)

    return _record("avg_pool2d", (x,), out, vjp)


# ---------------------------------------------------------------------------
# kernel relabeling
# ---------------------------------------------------------------------------


def reshape_kernel_4d_to_2d(kernel: Tensor) -> Tensor:
    """p x q x k x k kernel -> p x (q*k*k) matrix over the same row-major data."""
    if kernel.ndim != 4:
        raise ShapeError("expected a 4-D kernel")
    return reshape(kernel, (kernel.shape[0], -1))


def reshape_kernel_2d_to_4d(matrix: Tensor, q: int, k: int) -> Tensor:
    if matrix.ndim != 2 or matrix.shape[1] != q * k * k:
        raise ShapeError(f"matrix {matrix.shape} does not hold q={q}, k={k} columns")
    return reshape(matrix, (matrix.shape[0], q, k, k))
