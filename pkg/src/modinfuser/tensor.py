"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor`; when any input requires a
gradient the result remembers its parents and a backward rule. Calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order, so each node's rule runs exactly once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation."""


class DomainError(ValueError):
    """Raised when an operation is evaluated outside its domain."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        if not (isinstance(data, np.ndarray) and data.dtype == np.float64):
            data = np.array(data, dtype=np.float64)
        self.data: np.ndarray = data
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    # intermediate gradients live only for the duration of this pass
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# element-wise arithmetic -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), bw, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive input (min {a.data.min():.6g})")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), bw, "gelu")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


# reductions -------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _make(np.asarray(out), (a,), bw, "mean")


# shape manipulation -----------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, bw, "concat")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), bw, "slice")


def pad2d(a, padding: int) -> Tensor:
    """Zero-pad the last two axes."""
    a = as_tensor(a)
    if padding == 0:
        return a
    p = padding
    width = [(0, 0)] * (a.ndim - 2) + [(p, p), (p, p)]
    return _make(np.pad(a.data, width), (a,), lambda g: (g[..., p:-p, p:-p],), "pad")


# linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[B,Cin,H,W]`` with ``kernel[Cout,Cin,kh,kw]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} ({x.shape}) != kernel channels {kcin} ({kernel.shape})")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2:]
    cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, b, ho, wo).transpose(1, 0, 2, 3)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, cout, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, b * ho * wo)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = kernels.col2im(wmat.T @ g2, b, cin, hp, wp, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, bw, "conv2d")


def conv2d_transpose(x, kernel, bias=None, stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with the same kernel geometry.

    ``kernel`` is ``[Cin, Cout, kh, kw]`` where ``Cin`` matches ``x``; output
    size is ``(H-1)*stride - 2*padding + kh + output_padding``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d_transpose: expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    b, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d_transpose: input channels {cin} ({x.shape}) != kernel rows {kcin} ({kernel.shape})")
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (w - 1) * stride - 2 * padding + kw + output_padding
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d_transpose: empty output for input {x.shape} and kernel {kernel.shape}")
    hp, wp = ho + 2 * padding, wo + 2 * padding
    wmat = kernel.data.reshape(cin, -1)
    xf = x.data.transpose(1, 0, 2, 3).reshape(cin, b * h * w)
    outp = kernels.col2im(wmat.T @ xf, b, cout, hp, wp, kh, kw, stride, h, w)
    out = outp[:, :, padding:padding + ho, padding:padding + wo] if padding else outp
    out = np.ascontiguousarray(out)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, cout, 1, 1)
        parents.append(bias)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = kernels.im2col(gp, kh, kw, stride, h, w)
        gx = None
        if x.requires_grad:
            gx = (wmat @ gcols).reshape(cin, b, h, w).transpose(1, 0, 2, 3)
        gk = (xf @ gcols.T).reshape(kernel.shape) if kernel.requires_grad else None
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, bw, "conv2d_transpose")


def normalize(x, axes, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalisation over ``axes`` followed by an affine map.

    Layer norm is ``axes=(-1,)``; instance norm over ``[B,C,H,W]`` is ``axes=(2, 3)``.
    ``gain`` and ``bias`` must broadcast against ``x``.
    """
    x = as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    n = int(np.prod([x.shape[ax] for ax in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    parents = [x]
    gain_t = bias_t = None
    if gain is not None:
        gain_t = as_tensor(gain)
        out = out * gain_t.data
        parents.append(gain_t)
    if bias is not None:
        bias_t = as_tensor(bias)
        out = out + bias_t.data
        parents.append(bias_t)

    def bw(g):
        gxhat = g * gain_t.data if gain_t is not None else g
        gx = inv * (
            gxhat
            - gxhat.sum(axis=axes, keepdims=True) / n
            - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True) / n
        )
        grads = [gx]
        if gain_t is not None:
            grads.append(_unbroadcast(g * xhat, gain_t.shape))
        if bias_t is not None:
            grads.append(_unbroadcast(g, bias_t.shape))
        return tuple(grads)

    return _make(out, parents, bw, "normalize")


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    return normalize(x, (-1,), gain, bias, eps)


_FORWARD_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "reshape": reshape,
    "transpose": transpose,
    "concat": lambda *ts, axis=0: concat(ts, axis),
    "slice": getitem,
    "mean": mean,
    "sum": sum_,
    "exp": exp,
    "log": log,
    "abs": abs_,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "gelu": gelu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "power": power,
}


def forward_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_primitive("matmul", a, b)``."""
    try:
        fn = _FORWARD_OPS[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; known: {sorted(_FORWARD_OPS)}") from None
    return fn(*inputs, **kwargs)


def parameter(data) -> Tensor:
    """A leaf that accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)
