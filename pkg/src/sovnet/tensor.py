"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the capsule network needs are provided. A ``Tensor``
wraps a numpy array; every op that touches a tensor with
``requires_grad=True`` records a node on the tape, and ``backward`` walks
the tape once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946

# im2col scratch bound (elements) before a correlation is split over the batch.
_COL_BUDGET = 24_000_000

_DTYPES = (np.float32, np.float64)


class TensorError(Exception):
    pass


class ShapeMismatch(TensorError, ValueError):
    pass


class AxisOutOfRange(TensorError, IndexError):
    pass


class NonFiniteResult(TensorError, FloatingPointError):
    pass


class NonScalarRoot(TensorError, ValueError):
    pass


class TapeAlreadyConsumed(TensorError, RuntimeError):
    pass


_checked = False


def set_checked(flag: bool) -> bool:
    """Toggle checked mode globally; returns the previous setting."""
    global _checked
    prev, _checked = _checked, bool(flag)
    return prev


def is_checked() -> bool:
    return _checked


@contextlib.contextmanager
def checked(flag: bool = True):
    prev = set_checked(flag)
    try:
        yield
    finally:
        set_checked(prev)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if _checked and not np.all(np.isfinite(arr)):
        raise NonFiniteResult(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data.data if isinstance(data, Tensor) else data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _DTYPES else np.float64
        arr = np.asarray(arr, dtype=dtype, order="C")  # keeps 0-d arrays 0-d
        if arr.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._consumed = False

    # -- basic properties -------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axes=None, keep=False):
        return reduce_sum(self, axes, keep)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    _check_finite(data, op)
    out.data = data
    out.grad = None
    out._consumed = False
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise AxisOutOfRange(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted({_norm_axis(a, ndim) for a in axes}))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (trailing-dimension broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    out = []
    for x, y in zip(reversed((1,) * (len(b) - len(a)) + tuple(a)), reversed((1,) * (len(a) - len(b)) + tuple(b))):
        if x != y and 1 not in (x, y):
            raise ShapeMismatch(f"cannot broadcast {a} with {b}")
        out.append(max(x, y))
    return tuple(reversed(out))


# -- elementwise ---------------------------------------------------------------

def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a = Tensor(a)
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if a.dtype != b.dtype:
        # Python scalars and foreign arrays follow the tensor side.
        b = Tensor(b.data.astype(a.dtype)) if not b.requires_grad else b
    broadcast_shape(a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if _checked and np.any(b.data == 0):
        raise NonFiniteResult("division by zero")

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _make(a.data / b.data, (a, b), bw, "div")


def elementwise(op: str, a, b) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul, "div": div}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def selu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    pos = x > 0
    ex = np.exp(np.minimum(x, 0.0))
    out = SELU_SCALE * np.where(pos, x, SELU_ALPHA * (ex - 1.0))
    deriv = SELU_SCALE * np.where(pos, 1.0, SELU_ALPHA * ex)
    return _make(out.astype(a.dtype), (a,), lambda g: (g * deriv,), "selu")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -- reductions ------------------------------------------------------------------

def reduce_sum(a: Tensor, axes=None, keep: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axes(axes, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keep)
    kept_shape = tuple(1 if i in ax else n for i, n in enumerate(a.shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept_shape), a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor, axes=None, keep: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axes(axes, a.ndim)
    n = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    return mul(reduce_sum(a, ax, keep), 1.0 / n)


def max_along(a: Tensor, axis: int, keep: bool = False) -> Tensor:
    """Max over one axis; the gradient flows to the first maximal entry."""
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis)
    if not keep:
        out = np.squeeze(out, axis)

    def bw(g):
        grad = np.zeros_like(a.data)
        gk = g if keep else np.expand_dims(g, axis)
        np.put_along_axis(grad, np.expand_dims(idx, axis), gk, axis)
        return (grad,)

    return _make(out, (a,), bw, "max")


def two_norm(a: Tensor, axis: int = -1, eps: float = 0.0, keep: bool = False) -> Tensor:
    """sqrt(sum(x**2) + eps) along ``axis``."""
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True) + eps)
    out = n if keep else np.squeeze(n, axis)

    def bw(g):
        gk = g if keep else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (gk * a.data / n,)

    return _make(out, (a,), bw, "two_norm")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# -- shape ops -----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(_norm_axis(x, a.ndim) for x in axes)
    inv = np.argsort(axes)
    out = np.asarray(a.data.transpose(axes), order="C")
    return _make(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def expand_dims(a: Tensor, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _make(np.asarray(out, order="C"), (a,), bw, "getitem")


def take(a: Tensor, indices: np.ndarray, axis: int = -1) -> Tensor:
    """Gather along ``axis`` with an integer index array (any shape)."""
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)
    n = a.shape[axis]

    def bw(g):
        # g has a's leading axes, then indices.shape, then a's trailing axes.
        lead = a.shape[:axis]
        trail = a.shape[axis + 1:]
        g2 = g.reshape(lead + (indices.size,) + trail)
        grad = np.zeros(lead + (n,) + trail, dtype=g.dtype)
        flat = indices.reshape(-1)
        gm = np.moveaxis(g2, axis, 0)
        gr = np.moveaxis(grad, axis, 0)
        np.add.at(gr, flat, gm)
        return (grad,)

    return _make(np.asarray(out, order="C"), (a,), bw, "take")


def take_along(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    out = np.take_along_axis(a.data, indices, axis)

    def bw(g):
        grad = np.zeros_like(a.data)
        # indices along ``axis`` are unique per lane when used for pooling.
        np.put_along_axis(grad, indices, g, axis)
        return (grad,)

    return _make(out, (a,), bw, "take_along")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    ax = _norm_axis(axis, out.ndim)

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return _make(out, ts, bw, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = _norm_axis(axis, out.ndim)
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(out, ts, bw, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# -- planar correlation ------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp: (B, G, C, Hp, Wp) -> (G, C, k, k, B, ho, wo); x stays innermost so the gather streams rows
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(3, 4))
    win = win[:, :, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    return np.ascontiguousarray(win.transpose(1, 2, 5, 6, 0, 3, 4))


def _col2im(cols: np.ndarray, k: int, stride: int, hp: int, wp: int) -> np.ndarray:
    # adjoint of _im2col: scatter-add cols (G, C, k, k, B, ho, wo) into (B, G, C, hp, wp)
    G, C, _, _, B, ho, wo = cols.shape
    acc = np.zeros((G, C, B, hp, wp), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            acc[..., dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride] += cols[:, :, dy, dx]
    return acc.transpose(2, 0, 1, 3, 4)


def _chunk(G: int, K: int, ho: int, wo: int) -> int:
    return max(1, _COL_BUDGET // max(G * ho * wo * K, 1))


def _correlate_raw(xp: np.ndarray, wm: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Chunked im2col product: xp (B, G, C, Hp, Wp) already padded, wm (G, O, C*k*k)."""
    B, G = xp.shape[:2]
    O, K = wm.shape[1:]
    chunk = _chunk(G, K, ho, wo)
    out = np.empty((B, G, O, ho, wo), dtype=np.result_type(xp.dtype, wm.dtype))
    for s in range(0, B, chunk):
        xb = xp[s:s + chunk]
        nb = xb.shape[0]
        cols = _im2col(xb, k, stride, ho, wo).reshape(G, K, nb * ho * wo)
        res = np.matmul(wm, cols)  # (G, O, nb*ho*wo)
        out[s:s + nb] = res.reshape(G, O, nb, ho, wo).transpose(2, 0, 1, 3, 4)
    return out


def _pad_hw(arr: np.ndarray, lo: int, hi_h: int, hi_w: int) -> np.ndarray:
    if lo == 0 and hi_h == 0 and hi_w == 0:
        return arr
    return np.pad(arr, ((0, 0), (0, 0), (0, 0), (lo, hi_h), (lo, hi_w)))


def correlate2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Grouped planar cross-correlation with zero padding.

    x: (B, G, Cin, H, W); w: (G, Cout, Cin, k, k) -> (B, G, Cout, Ho, Wo).
    """
    x, w = as_tensor(x), as_tensor(w, x)
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeMismatch("correlate2d expects x (B,G,C,H,W) and w (G,O,C,k,k)")
    B, G, C, H, W = x.shape
    Gw, O, Cw, k, k2 = w.shape
    if Gw != G or Cw != C or k != k2:
        raise ShapeMismatch(f"correlate2d: x {x.shape} vs w {w.shape}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < k or Wp < k:
        raise ShapeMismatch("input smaller than kernel")
    ho = (Hp - k) // stride + 1
    wo = (Wp - k) // stride + 1
    K = C * k * k
    wm = w.data.reshape(G, O, K)
    out = _correlate_raw(_pad_hw(x.data, padding, padding, padding), wm, k, stride, ho, wo)

    def bw(g):
        gw = np.zeros((G, O, K), dtype=w.dtype) if w.requires_grad else None
        gxp = np.empty((B, G, C, Hp, Wp), dtype=x.dtype) if x.requires_grad else None
        wt = wm.transpose(0, 2, 1)
        chunk = _chunk(G, K, ho, wo)
        for s in range(0, B, chunk):
            nb = min(chunk, B - s)
            gb = np.ascontiguousarray(g[s:s + nb].transpose(1, 2, 0, 3, 4)).reshape(G, O, nb * ho * wo)
            if gw is not None:
                cols = _im2col(_pad_hw(x.data[s:s + nb], padding, padding, padding), k, stride, ho, wo)
                gw += np.matmul(gb, cols.reshape(G, K, nb * ho * wo).transpose(0, 2, 1))
                del cols
            if gxp is not None:
                dcols = np.matmul(wt, gb).reshape(G, C, k, k, nb, ho, wo)
                gxp[s:s + nb] = _col2im(dcols, k, stride, Hp, Wp)
        gx = None
        if gxp is not None:
            gx = gxp[..., padding:padding + H, padding:padding + W] if padding else gxp
        return (gx, gw.reshape(w.shape) if gw is not None else None)

    return _make(out, (x, w), bw, "correlate2d")


# -- backward ------------------------------------------------------------------------

def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``root``.

    The tape is consumed: interior nodes release their closures, and a second
    call on the same root raises ``TapeAlreadyConsumed``.
    """
    if root._consumed:
        raise TapeAlreadyConsumed("backward already ran on this tape")
    if root.data.size != 1:
        raise NonScalarRoot(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise TensorError("root does not participate in a tape")
    order = _topo(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None and node.requires_grad:
                _check_finite(g, "gradient")
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    root._consumed = True


def no_grad_params(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
