"""Minimal reverse-mode autodiff over dense float64 tensors.

Differentiable ops are recorded on an explicit :class:`Tape` that is active
for the duration of a forward pass::

    with Tape() as tape:
        loss = mean(relu(conv2d(x, w, b, padding=1)))
    grads = tape.backward(loss)
    grads[w]  # Tensor with w's shape

A tape is single-use and confined to one thread.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "GradientStore",
    "ShapeError",
    "tensor",
    "detach",
    "finite_difference_gradient",
    "op_apply",
]

DTYPE = np.float64

_ids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float64 array that can participate in a tape."""

    __slots__ = ("data", "requires_grad", "id", "tape_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic sugar; all routed through the op table
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / other)
        return divide(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() requires a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(t: Tensor) -> Tensor:
    """Same values, excluded from differentiation."""
    return Tensor(t.data, requires_grad=False)


class _Node:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind, inputs, output, backward):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradientStore:
    """Mapping from tensors to their gradients after a backward pass."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __contains__(self, t: Tensor) -> bool:
        return t.id in self._grads

    def __getitem__(self, t: Tensor) -> Tensor:
        return Tensor(self._grads[t.id])

    def __len__(self) -> int:
        return len(self._grads)

    def get(self, t: Tensor, default=None):
        if t.id in self._grads:
            return Tensor(self._grads[t.id])
        return default

    def array(self, t: Tensor) -> np.ndarray:
        """Raw gradient array for ``t`` (zeros if ``t`` got no gradient)."""
        g = self._grads.get(t.id)
        return np.zeros(t.shape, dtype=DTYPE) if g is None else g


class Tape:
    """Records differentiable ops while active (``with Tape() as tape``)."""

    _counter = itertools.count()

    def __init__(self):
        self.id = next(Tape._counter)
        self.nodes: list[_Node] = []
        self._used = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, kind, inputs, output, backward):
        output.tape_id = self.id
        self.nodes.append(_Node(kind, inputs, output, backward))

    def backward(self, loss: Tensor, inputs: Sequence[Tensor] | None = None) -> GradientStore:
        """Reverse sweep from a scalar ``loss``.

        Returns gradients for every requires_grad tensor reachable from the
        loss (leaves and intermediates). When ``inputs`` is given only those
        tensors are kept and the sweep stops once nothing upstream of them
        remains.
        """
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if self._used:
            raise RuntimeError("tape already consumed by a previous backward pass")
        self._used = True
        if not loss.requires_grad:
            return GradientStore({})
        if loss.tape_id != self.id:
            raise RuntimeError("backward: loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape, dtype=DTYPE)}
        keep = None if inputs is None else {t.id for t in inputs}
        stop_at = None
        if keep is not None:
            # earliest node producing one of the requested tensors; leaves stop at 0
            producers = [i for i, n in enumerate(self.nodes) if n.output.id in keep]
            stop_at = min(producers) if producers and len(producers) == len(keep) else 0
        for idx in range(len(self.nodes) - 1, -1, -1):
            if stop_at is not None and idx < stop_at:
                break
            node = self.nodes[idx]
            g = grads.get(node.output.id)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.id)
                grads[t.id] = gi if prev is None else prev + gi
        if keep is not None:
            grads = {k: v for k, v in grads.items() if k in keep}
        return GradientStore(grads)


def _record(kind: str, inputs: tuple, out_data: np.ndarray, backward: Callable) -> Tensor:
    if not np.isfinite(out_data).all():
        raise FloatingPointError(f"{kind}: produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(kind, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shapes(kind: str, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# --------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _record("subtract", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes("elementwise_mul", a, b)
    ad, bd = a.data, b.data
    return _record("elementwise_mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def divide(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes("divide", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _record("divide", (a, b), out,
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scalar_mul", (a,), a.data * c, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(a)), stable for large |a|."""
    x = a.data
    out = -np.logaddexp(0.0, -x)
    return _record("log_sigmoid", (a,), out, lambda g: (g * _stable_sigmoid(-x),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise FloatingPointError("log: non-positive input")
    return _record("log", (a,), np.log(x), lambda g: (g / x,))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _record("abs", (a,), np.abs(a.data), lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _record("square", (a,), x * x, lambda g: (2.0 * g * x,))


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record("sum", (a,), np.asarray(out), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if n == 0:
        raise ShapeError(f"mean: empty reduction over axes {axes} of shape {a.shape}")
    shape = a.shape
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return _record("mean", (a,), np.asarray(out), backward)


def _extreme(kind, a: Tensor, axis, keepdims, reducer):
    axes = _norm_axes(axis, a.ndim)
    out_k = reducer(a.data, axis=axes, keepdims=True)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        # ties share the gradient equally
        hit = a.data == out_k
        return (g * hit / hit.sum(axis=axes, keepdims=True),)

    out = out_k if keepdims else np.squeeze(out_k, axis=axes)
    return _record(kind, (a,), out, backward)


def amax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme("amax", a, axis, keepdims, np.max)


def amin(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme("amin", a, axis, keepdims, np.min)


def softmax(a: Tensor, axis=-1) -> Tensor:
    """Softmax over one axis or jointly over several axes."""
    axes = _norm_axes(axis, a.ndim)
    z = a.data - a.data.max(axis=axes, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axes, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axes, keepdims=True)),)

    return _record("softmax", (a,), out, backward)


# ------------------------------------------------------------------- shaping


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tensors, out, backward)


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"upsample_nearest: need >= 2 dims, got {a.shape}")
    f = int(factor)
    out = a.data.repeat(f, axis=-2).repeat(f, axis=-1)
    h, w = a.shape[-2:]

    def backward(g):
        g = g.reshape(g.shape[:-2] + (h, f, w, f))
        return (g.sum(axis=(-3, -1)),)

    return _record("upsample_nearest", (a,), out, backward)


# ------------------------------------------------------------------- layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with weight shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = (g @ wd, g.T @ xd)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return _record("linear", inputs, out, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (Cout, Cin, kh, kw) weight, zero padding."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    s, p = int(stride), int(padding)
    hp, wp = h + 2 * p, w + 2 * p
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    # (n, cin*kh*kw, ho*wo) column tensor
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, cin * kh * kw, ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.reshape(n, cout, ho * wo)
        gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if not x.requires_grad:
            gx = None
        else:
            gx = _conv_input_grad(np.matmul(wmat.T, gm).reshape(n, cin, kh, kw, ho, wo))
        grads = (gx, gw)
        return grads if bias is None else grads + (gm.sum(axis=(0, 2)),)

    def _conv_input_grad(gcols):
        if kh == 1 and kw == 1 and s == 1:
            gxp = gcols[:, :, 0, 0]
        else:
            gxp = np.zeros((n, cin, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, i, j]
        return gxp[:, :, p:p + h, p:p + w] if p else gxp

    return _record("conv2d", inputs, out, backward)


def max_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride = kernel); trailing rows/cols dropped."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected NCHW input, got {x.shape}")
    k = int(kernel)
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeError(f"max_pool2d: kernel {k} larger than input {x.shape}")
    blocks = x.data[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, ho, wo, k * k), dtype=DTYPE)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        gx = np.zeros((n, c, h, w), dtype=DTYPE)
        gx[:, :, :ho * k, :wo * k] = gb
        return (gx,)

    return _record("max_pool2d", (x,), out, backward)


# ------------------------------------------------------------ generic entry

OPS: dict[str, Callable[..., Tensor]] = {
    "conv2d": conv2d,
    "relu": relu,
    "add": add,
    "subtract": subtract,
    "elementwise_mul": mul,
    "divide": divide,
    "scalar_mul": scalar_mul,
    "linear": linear,
    "softmax": softmax,
    "mean": mean,
    "sum": sum_,
    "abs": abs_,
    "square": square,
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "exp": exp,
    "log": log,
    "amax": amax,
    "amin": amin,
    "max_pool2d": max_pool2d,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "reshape": reshape,
    "upsample_nearest": upsample_nearest,
}


def op_apply(kind: str, inputs: Iterable[Tensor], **attrs) -> Tensor:
    """Apply an op by name, e.g. ``op_apply("conv2d", [x, w, b], padding=1)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# --------------------------------------------------------------- FD oracle


def finite_difference_gradient(f: Callable[[Tensor], Tensor | float], x: Tensor,
                               eps: float = 1e-5) -> Tensor:
    """Central-difference estimate of d f(x) / dx, one element at a time."""
    base = np.array(x.data, dtype=DTYPE)
    flat = base.reshape(-1)
    grad = np.empty_like(flat)

    def value(arr):
        out = f(Tensor(arr.reshape(base.shape)))
        return float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value(flat)
        flat[i] = orig - eps
        lo = value(flat)
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * eps)
    return Tensor(grad.reshape(base.shape))
