"""Dense float64 tensors with a small reverse-mode autodiff tape.

Every op builds its output eagerly and, when any input requires a gradient,
records the inputs plus a closure mapping the output gradient to one gradient
per input. ``backward`` walks the recorded graph once in reverse topological
order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_FLOOR = 1e-12

_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation, pseudo-label generation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""

    # -- construction -------------------------------------------------------

    @classmethod
    def full(cls, shape: Sequence[int], value: float, requires_grad: bool = False) -> Tensor:
        _check_shape(shape)
        return cls(np.full(tuple(shape), float(value)), requires_grad)

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False) -> Tensor:
        return cls.full(shape, 0.0, requires_grad)

    @classmethod
    def from_data(cls, shape: Sequence[int], data: Iterable[float],
                  requires_grad: bool = False) -> Tensor:
        _check_shape(shape)
        flat = np.asarray(list(data) if not isinstance(data, np.ndarray) else data,
                          dtype=np.float64).ravel()
        if flat.size != int(np.prod(shape)):
            raise ShapeError(f"data length {flat.size} does not match shape {tuple(shape)}")
        return cls(flat.reshape(tuple(shape)), requires_grad)

    @classmethod
    def uniform(cls, shape: Sequence[int], lo: float, hi: float, seed: int,
                requires_grad: bool = False) -> Tensor:
        _check_shape(shape)
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(lo, hi, size=tuple(shape)), requires_grad)

    # -- properties ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_shape(shape: Sequence[int]) -> None:
    if any(int(d) < 1 for d in shape):
        raise ShapeError(f"extents must be >= 1, got {tuple(shape)}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


# -- elementwise --------------------------------------------------------------

def _binary_operand(a: Tensor, b) -> Tensor | float:
    if isinstance(b, np.ndarray) and b.ndim > 0:
        b = Tensor(b)
    if isinstance(b, Tensor):
        if b.shape != a.shape and b.data.size != 1:
            raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
        return b
    return float(b)


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # scalar-with-tensor is the only broadcast allowed
    return g if t.shape == g.shape else np.asarray(g.sum()).reshape(t.shape)


def add(a: Tensor, b) -> Tensor:
    b = _binary_operand(a, b)
    if not isinstance(b, Tensor):
        return _make(a.data + b, (a,), lambda g: (g,), "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b)), "add")


def sub(a: Tensor, b) -> Tensor:
    b = _binary_operand(a, b)
    if not isinstance(b, Tensor):
        return _make(a.data - b, (a,), lambda g: (g,), "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, _reduce_to(-g, b)), "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _binary_operand(a, b)
    if not isinstance(b, Tensor):
        return _make(a.data * b, (a,), lambda g: (g * b,), "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, b)), "mul")


def div(a: Tensor, b) -> Tensor:
    b = _binary_operand(a, b)
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b),
                 lambda g: (g / bd, _reduce_to(-g * ad / (bd * bd), b)), "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log of non-positive value; clamp the input first")
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = a.data
    out = np.clip(x, -np.inf if lo is None else lo, np.inf if hi is None else hi)
    inside = out == x
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


def safe_log(a: Tensor) -> Tensor:
    return log(clamp(a, LOG_FLOOR, None))


# -- reductions / reshaping ---------------------------------------------------

def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def _bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), _bw, "sum")


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),), "reshape")


def global_avg_pool(x: Tensor) -> Tensor:
    """N×C×H×W -> N×C."""
    return mean(x, axis=(2, 3))


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x (N×F) @ weight (F×O) + bias (O)."""
    y = matmul(x, weight)
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    return _make(y.data + bias.data, (y, bias), lambda g: (g, g.sum(axis=0)), "bias")


# -- image ops (NCHW) ---------------------------------------------------------

def _im2col(xp_nhwc: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Padded N×H×W×C -> (N·Ho·Wo) × (C·kh·kw) patch matrix."""
    win = sliding_window_view(xp_nhwc, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    return win.reshape(n * ho * wo, -1)


def _pad_hw(x_nhwc: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x_nhwc, ((0, 0), (p, p), (p, p), (0, 0))) if p else x_nhwc


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and OIHW kernel")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise ShapeError(f"input has {c} channels, kernel expects {ci}")
    if bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")
    if stride < 1 or pad < 0:
        raise ShapeError("stride must be >= 1 and pad >= 0")
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError("kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    # work channels-last so each patch row is one contiguous copy
    xp = _pad_hw(x.data.transpose(0, 2, 3, 1), pad)
    cols = _im2col(xp, kh, kw, stride)
    wmat = kernel.data.reshape(o, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def _bw(g):
        gn = g.transpose(0, 2, 3, 1)
        gflat = gn.reshape(-1, o)
        gk = (gflat.T @ cols).reshape(kernel.shape)
        gb = gflat.sum(axis=0)
        if stride == 1 and pad <= min(kh, kw) - 1 and kh == kw:
            # input gradient = full correlation of g with the flipped, transposed kernel
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gcols = _im2col(_pad_hw(gn, kh - 1 - pad), kh, kw, 1)
            gx = (gcols @ flipped.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            return gx, gk, gb
        gcols = (gflat @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros((n, hp, wp, c))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[..., i, j]
        gx = gxp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2)
        return gx, gk, gb

    return _make(out, (x, kernel, bias), _bw, "conv2d")


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    if window != 2:
        raise ShapeError("only 2×2 max pooling is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even extents, got {h}×{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum in row-major order within each window
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return _make(out, (x,), _bw, "maxpool2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def _bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), _bw, "upsample")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), _bw, "softmax")


# -- reverse pass -------------------------------------------------------------

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
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Gradients of reached tensors are overwritten, not accumulated, so a second
    call on a fresh graph gives the same values as the first.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(_scalar(f(base.copy())))
        flat[i] = orig - eps
        fm = float(_scalar(f(base.copy())))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(np.asarray(v).reshape(-1)[0])
