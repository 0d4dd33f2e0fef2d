"""Dense float64 tensors with a small reverse-mode differentiation tape.

Every operation returns a new :class:`Tensor`; when any operand requires a
gradient the result records its parents and a closure mapping the output
gradient to one gradient per parent. :meth:`Tensor.backward` replays those
closures in reverse creation order, so the traversal is deterministic and
visits each node once.
"""
from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "make_node",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "tsum",
    "mean",
    "relu",
    "gelu",
    "elementwise",
    "add_bias",
    "columns",
    "conv2d",
    "softmax_cross_entropy",
]

_order = itertools.count()
_state = threading.local()

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording parents (inference only)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation.

    Leaves created with ``requires_grad=True`` own a zero-initialised
    ``grad`` buffer which :meth:`backward` accumulates into; call
    :meth:`zero_grad` between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_grad_fn", "_op", "_order")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.name = name
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable] = None
        self._op = "leaf"
        self._order = next(_order)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- differentiation --------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every leaf that this scalar depends on."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        pending = {id(self): np.ones_like(self.data)}
        for node in sorted(nodes.values(), key=lambda t: t._order, reverse=True):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._grad_fn is None:
                node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable operation.

    ``grad_fn`` receives the gradient of the output and must return one
    array (or ``None``) per parent, in order.
    """
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    _check_finite(arr, f"output of {op}")
    out.data = arr
    out.name = None
    out._op = op
    out._order = next(_order)
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.grad = None
    out._parents = tuple(parents) if track else ()
    out._grad_fn = grad_fn if track else None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- pointwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return make_node(a.data * s, (a,), lambda g: (g * s,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def gelu(a) -> Tensor:
    """tanh-approximated GELU, ``0.5 x (1 + tanh(c (x + 0.044715 x^3)))``, c = sqrt(2/pi)."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(GELU_C * (x + GELU_A * x**3))
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    deriv = 0.5 * (1.0 + t) + 0.5 * x * dt
    return make_node(0.5 * x * (1.0 + t), (a,), lambda g: (g * deriv,), "gelu")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale, "relu": relu, "gelu": gelu}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name to one of add, sub, mul, scale, relu, gelu."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


# -- shape and reductions --------------------------------------------------
def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    return make_node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    orig = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def tsum(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.sum(a.data), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    return make_node(np.mean(a.data), (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean")


def columns(a, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"columns[{start}:{stop}] invalid for shape {a.shape}")

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return make_node(a.data[:, start:stop].copy(), (a,), grad_fn, "columns")


def add_bias(x, b) -> Tensor:
    """Add a length-N bias to every row of a B x N tensor."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    return make_node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


# -- linear algebra --------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product of an M x K and a K x N tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation of a B x Cin x H x W input.

    ``out[b, o, i, j] = sum_{c, u, v} x[b, c, i*stride + u, j*stride + v] * w[o, c, u, v]``
    on the zero-padded input. The loop runs over kernel offsets; each offset
    contributes one strided slice of the input.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    span_h, span_w = h + 2 * padding - kh, wd + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d: output extent not integral for input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wdat = w.data

    def window(u, v):
        return (slice(None), slice(None),
                slice(u, u + stride * (ho - 1) + 1, stride),
                slice(v, v + stride * (wo - 1) + 1, stride))

    out = np.zeros((bsz, cout, ho, wo))
    for u in range(kh):
        for v in range(kw):
            out += np.einsum("bchw,oc->bohw", xp[window(u, v)], wdat[:, :, u, v])
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
        out += bias.data[None, :, None, None]
        parents.append(bias)

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wdat)
        for u in range(kh):
            for v in range(kw):
                sl = window(u, v)
                gw[:, :, u, v] = np.einsum("bohw,bchw->oc", g, xp[sl])
                gxp[sl] += np.einsum("bohw,oc->bchw", g, wdat[:, :, u, v])
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make_node(out, parents, grad_fn, "conv2d")


# -- losses ----------------------------------------------------------------
def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects B x C logits, got {logits.shape}")
    bsz, ncls = logits.shape
    y = np.asarray(labels)
    if y.shape != (bsz,) or not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"labels must be {bsz} integers, got shape {y.shape} dtype {y.dtype}")
    if y.size and (y.min() < 0 or y.max() >= ncls):
        raise ValueError(f"labels must lie in [0, {ncls}), got range [{y.min()}, {y.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(bsz)
    loss = np.mean(lse - z[rows, y])

    def grad_fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, y] -= 1.0
        return (p * (float(g) / bsz),)

    return make_node(loss, (logits,), grad_fn, "softmax_cross_entropy")
