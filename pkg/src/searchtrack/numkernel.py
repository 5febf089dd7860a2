"""Dense float64 tensors with reverse-mode differentiation.

Every op records its parents and a backward closure on the output tensor.
``backward`` walks the recorded graph in reverse topological order, fills
``grad`` on every leaf that requires it, then releases the graph so a second
call on the same loss fails loudly.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "velocity", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.velocity: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._spent = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.shape)
        else:
            self.grad += g.reshape(self.shape)

    def backward(self) -> None:
        backward(self)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __pow__(self, p: int):
        return power(self, p)

    def __getitem__(self, idx):
        return index(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: a._accumulate(-g))


def power(a: Tensor, p: int) -> Tensor:
    p = int(p)

    def fn(g):
        a._accumulate(g * p * a.data ** (p - 1))

    return _result(a.data**p, (a,), fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: x._accumulate(g * mask))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, (x,), lambda g: x._accumulate(g * y * (1.0 - y)))


def log(x: Tensor) -> Tensor:
    d = x.data
    return _result(np.log(d), (x,), lambda g: x._accumulate(g / d))


def absolute(x: Tensor) -> Tensor:
    d = x.data
    return _result(np.abs(d), (x,), lambda g: x._accumulate(g * np.sign(d)))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return _result(np.clip(d, lo, hi), (x,), lambda g: x._accumulate(g * inside))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: x._accumulate(np.broadcast_to(g, shape)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(tuple(shape)), (x,), lambda g: x._accumulate(g.reshape(old)))


def index(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return _result(np.array(x.data[idx], dtype=DTYPE), (x,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis of C x H x W maps."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ValueError(f"concat_channels expects C x H x W tensors, got {a.shape} and {b.shape}")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"concat_channels spatial mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    return concat([a, b], axis=0)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return index(x, (slice(start, stop),))


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (h_out - 1) * stride + 1 : stride, : (w_out - 1) * stride + 1 : stride]
    # (Cin, Ho, Wo, k, k) -> (Cin*k*k, Ho*Wo)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(-1, h_out * w_out)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a Cin x H x W map with a Cout x Cin x k x k kernel."""
    if x.data.ndim != 3:
        raise ValueError(f"conv2d input must be Cin x H x W, got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d weight must be Cout x Cin x k x k, got shape {weight.shape}")
    cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has Cin={cin}, weight expects Cin={wcin}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d kernel must be square with odd size, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d pad must be >= 0, got {pad}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias must have Cout={cout} entries, got shape {bias.shape}")
    k = kh
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(f"conv2d input {h}x{w} too small for kernel {k} with pad {pad}")

    if k == 1 and pad == 0 and stride == 1:
        cols = x.data.reshape(cin, h * w)
        xp_shape = None
    else:
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
        xp_shape = xp.shape
        cols = _im2col(xp, k, stride, h_out, w_out)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, h_out, w_out)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        g2 = g.reshape(cout, -1)
        if weight.requires_grad:
            weight._accumulate((g2 @ cols.T).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=1))
        if x.requires_grad:
            dcols = wmat.T @ g2
            if xp_shape is None:
                x._accumulate(dcols.reshape(x.shape))
                return
            dxp = np.zeros(xp_shape, dtype=DTYPE)
            dcols = dcols.reshape(cin, k, k, h_out, w_out)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += dcols[:, i, j]
            x._accumulate(dxp[:, pad : pad + h, pad : pad + w])

    return _result(out, parents, fn)


# ---------------------------------------------------------------------------
# backward pass and optimizer


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from scalar ``loss``."""
    if loss._spent:
        raise RuntimeError("backward called twice on the same graph; re-run the forward pass first")
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")

    order = []
    seen = set()
    stack = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones(loss.shape, dtype=DTYPE)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    # release the graph: interior grads and closures are no longer needed
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            if node is not loss:
                node.grad = None
    loss._spent = True


def sgd_step(params: Iterable[Tensor], lr: float, momentum: float = 0.0) -> None:
    """Momentum SGD: v <- momentum*v + grad; p <- p - lr*v; grads are zeroed."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError("sgd_step: parameter has no gradient; run backward first")
    for p in params:
        if p.velocity is None:
            p.velocity = np.zeros_like(p.data)
        p.velocity = momentum * p.velocity + p.grad
        p.data = p.data - lr * p.velocity
        p.grad = np.zeros_like(p.data)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale grads in place so their global L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params:
            p.grad *= scale
    return total
