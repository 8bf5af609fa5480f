"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient
the op records a :class:`Node` holding its parents and a closure mapping the
output gradient to input gradients. :func:`backward` replays the recorded
nodes in reverse creation order.

Shapes are never broadcast implicitly; use :func:`expand` to make a
broadcast explicit.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse
from scipy.special import expit

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_seq = itertools.count()
_op_hooks: list[Callable[[str, int], None]] = []


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class AutogradError(RuntimeError):
    """Raised on misuse of the backward pass."""


class Node:
    __slots__ = ("parents", "backward_fn", "seq", "consumed")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.consumed = False


class Tensor:
    """A dense array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

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
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return reduce(self, "sum")

    def mean(self) -> "Tensor":
        return reduce(self, "mean")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def count_ops(callback: Callable[[str, int], None]):
    """Report ``(op_name, flops)`` for every op executed inside the block."""
    _op_hooks.append(callback)
    try:
        yield
    finally:
        _op_hooks.remove(callback)


def _report(name: str, flops: int) -> None:
    for hook in _op_hooks:
        hook(name, int(flops))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(tuple(parents), backward_fn)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        dims = [i for i, (x, y) in enumerate(zip(a.shape, b.shape)) if x != y]
        where = f"dimension {dims[0]}" if dims and a.ndim == b.ndim else "rank"
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ in {where}")


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D (n, c, h, w) tensor, got shape {x.shape}")


# ---------------------------------------------------------------- backward


class Tape:
    """Ordered record of the nodes reachable from a loss.

    Built by walking parent links; ``nodes`` is in recording order so the
    backward replay simply iterates it reversed.
    """

    def __init__(self, root: Tensor):
        seen: set[int] = set()
        nodes: list[Node] = []
        leaves: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None:
                if t.requires_grad:
                    leaves[id(t)] = t
                continue
            if id(node) in seen:
                continue
            if node.consumed:
                raise AutogradError("graph already consumed by a previous backward(); re-run the forward pass")
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.parents)
        nodes.sort(key=lambda n: n.seq)
        self.nodes = nodes
        self.leaves = leaves


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Leaves passed explicitly through ``leaves`` get a zero gradient when the
    loss does not depend on them. Gradients accumulate into existing buffers.
    """
    if loss.size != 1:
        raise AutogradError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutogradError("loss does not require grad; nothing to differentiate")
    tape = Tape(loss)
    # interior gradients are keyed by node, leaf gradients by tensor
    node_grads: dict[int, np.ndarray] = {}
    leaf_grads: dict[int, np.ndarray] = {}

    def push(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad or g is None:
            return
        if t._node is None:
            key, store = id(t), leaf_grads
        else:
            key, store = id(t._node), node_grads
        if key in store:
            store[key] = store[key] + g
        else:
            store[key] = g

    push(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        g = node_grads.pop(id(node), None)
        if g is not None:
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                push(p, pg)
        node.consumed = True
        node.backward_fn = None
        node.parents = ()

    targets = dict(tape.leaves)
    if leaves is not None:
        for leaf in leaves:
            targets[id(leaf)] = leaf
    for key, leaf in targets.items():
        g = leaf_grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# -------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    _report("add", a.size)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    _report("sub", a.size)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    _report("mul", a.size)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    _report("div", a.size)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd))


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    fn = _BINARY.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_BINARY)}")
    return fn(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    f = x.dtype.type(factor)
    return _result(x.data * f, (x,), lambda g: (g * f,))


def shift(x: Tensor, offset: float) -> Tensor:
    o = x.dtype.type(offset)
    return _result(x.data + o, (x,), lambda g: (g,))


def square(x: Tensor) -> Tensor:
    d = x.data
    _report("square", x.size)
    return _result(d * d, (x,), lambda g: (2 * g * d,))


def absolute(x: Tensor) -> Tensor:
    d = x.data
    _report("abs", x.size)
    return _result(np.abs(d), (x,), lambda g: (g * np.sign(d),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    d = x.data
    _report("clip", x.size)
    inside = (d >= lo) & (d <= hi)
    return _result(np.clip(d, lo, hi), (x,), lambda g: (g * inside,))


def activation(x: Tensor, kind: str) -> Tensor:
    d = x.data
    _report(kind, x.size)
    if kind == "relu":
        mask = d > 0
        return _result(d * mask, (x,), lambda g: (g * mask,))
    if kind == "relu6":
        mask = (d > 0) & (d < 6)
        return _result(np.clip(d, 0, 6), (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        s = expit(d)
        return _result(s, (x,), lambda g: (g * s * (1 - s),))
    if kind == "tanh":
        t = np.tanh(d)
        return _result(t, (x,), lambda g: (g * (1 - t * t),))
    raise ValueError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


# ----------------------------------------------------------- shape helpers


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    for x in xs:
        _require_4d(x, "concat_channels")
    n, _, h, w = xs[0].shape
    for i, x in enumerate(xs[1:], 1):
        if (x.shape[0], x.shape[2], x.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels: input {i} has (n,h,w)={(x.shape[0], x.shape[2], x.shape[3])}, expected {(n, h, w)}"
            )
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=1)
    return _result(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=1)))


def expand(x: Tensor, shape: tuple) -> Tensor:
    """Explicit broadcast of size-1 axes up to ``shape``."""
    if x.ndim != len(shape) or any(s != 1 and s != t for s, t in zip(x.shape, shape)):
        raise ShapeError(f"expand: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s == 1 and t != 1)
    out = np.broadcast_to(x.data, shape)
    return _result(out, (x,), lambda g: (g.sum(axis=axes, keepdims=True),))


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial window ``[top:top+height, left:left+width]``."""
    _require_4d(x, "crop")
    if top < 0 or left < 0 or top + height > x.shape[2] or left + width > x.shape[3] or height < 1 or width < 1:
        raise ShapeError(f"crop: window ({top},{left},{height},{width}) outside {x.shape[2:]}")
    sl = (slice(None), slice(None), slice(top, top + height), slice(left, left + width))

    def bw(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return _result(x.data[sl], (x,), bw)


def reduce(x: Tensor, mode: str = "mean") -> Tensor:
    """Sum or mean over every element, returning a 0-d tensor."""
    if x.size == 0:
        raise ShapeError("reduce: empty tensor")
    _report("reduce", x.size)
    if mode == "sum":
        return _result(np.asarray(x.data.sum(dtype=x.dtype)), (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))
    if mode == "mean":
        n = x.size
        return _result(
            np.asarray(x.data.mean(dtype=x.dtype)), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),)
        )
    raise ValueError(f"unknown reduce mode {mode!r}")


def global_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Per-channel spatial mean or max, shape ``(n, c, 1, 1)``."""
    _require_4d(x, "global_pool")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError("global_pool: empty spatial extent")
    _report("global_pool", x.size)
    return _pool(x, (2, 3), mode)


def channel_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Mean or max across channels, shape ``(n, 1, h, w)``."""
    _require_4d(x, "channel_pool")
    _report("channel_pool", x.size)
    return _pool(x, (1,), mode)


def _pool(x: Tensor, axes: tuple, mode: str) -> Tensor:
    d = x.data
    if mode == "avg":
        count = int(np.prod([d.shape[a] for a in axes]))
        out = d.mean(axis=axes, keepdims=True, dtype=d.dtype)
        return _result(out, (x,), lambda g: (np.broadcast_to(g / count, d.shape).copy(),))
    if mode == "max":
        out = d.max(axis=axes, keepdims=True)
        mask = d == out
        # ties share the gradient evenly
        share = mask / mask.sum(axis=axes, keepdims=True)
        return _result(out, (x,), lambda g: (g * share,))
    raise ValueError(f"unknown pool mode {mode!r}")


# ------------------------------------------------------------ convolutions


def _out_size(size: int, k: int, stride: int, pad: int, op: str, dim: str) -> int:
    o = (size + 2 * pad - k) // stride + 1
    if o < 1:
        raise ShapeError(f"{op}: {dim} {size} too small for kernel {k} with padding {pad}")
    return o


def _pad(d: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return d
    return np.pad(d, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(n, c, H, W) padded input -> (n, c*kh*kw, ho*wo) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D cross-correlation with zero padding."""
    _require_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (co, ci, kh, kw), got {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} / padding={padding}")
    n, ci, h, w = x.shape
    co, wci, kh, kw = weight.shape
    if wci != ci:
        raise ShapeError(f"conv2d: input channels (dimension 1) = {ci} but weight expects {wci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
    ho = _out_size(h, kh, stride, padding, "conv2d", "height")
    wo = _out_size(w, kw, stride, padding, "conv2d", "width")
    _report("conv2d", 2 * co * ci * kh * kw * ho * wo * n)

    out, bw = _conv_im2col(x, weight, bias, stride, padding, ho, wo)
    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw)


def _conv_im2col(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int, padding: int, ho: int, wo: int):
    xd, wd = x.data, weight.data
    n, ci, h, w = xd.shape
    co, _, kh, kw = wd.shape
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    wmat = wd.reshape(co, -1)
    if pointwise:
        cols = xd.reshape(n, ci, h * w)
    else:
        cols = _im2col(_pad(xd, padding), kh, kw, stride, ho, wo)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, co, ho, wo)
    del cols

    def bw(g):
        g2 = g.reshape(n, co, ho * wo)
        if pointwise:
            c = xd.reshape(n, ci, h * w)
        else:
            c = _im2col(_pad(xd, padding), kh, kw, stride, ho, wo)
        gw = None
        if weight.requires_grad:
            gw = np.zeros_like(wmat)
            for i in range(n):
                gw += g2[i] @ c[i].T
            gw = gw.reshape(wd.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2)
            gx = _col2im(dcols, xd.shape, kh, kw, stride, padding, ho, wo)
        gb = g2.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    return out, bw


def _col2im(dcols, shape, kh, kw, stride, pad, ho, wo):
    n, c, h, w = shape
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        return dcols.reshape(shape)
    d = dcols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, i, j]
    return out[:, :, pad : pad + h, pad : pad + w] if pad else out


def depthwise_conv2d(
    x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, bias: Optional[Tensor] = None
) -> Tensor:
    """Per-channel 2-D cross-correlation; ``weight`` is ``(c, 1, kh, kw)``."""
    _require_4d(x, "depthwise_conv2d")
    if weight.ndim != 4 or weight.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d: weight must be (c, 1, kh, kw), got {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"depthwise_conv2d: invalid stride={stride} / padding={padding}")
    n, c, h, w = x.shape
    if weight.shape[0] != c:
        raise ShapeError(f"depthwise_conv2d: input channels (dimension 1) = {c} but weight has {weight.shape[0]}")
    if bias is not None and bias.shape != (c,):
        raise ShapeError(f"depthwise_conv2d: bias shape {bias.shape} != ({c},)")
    kh, kw = weight.shape[2:]
    ho = _out_size(h, kh, stride, padding, "depthwise_conv2d", "height")
    wo = _out_size(w, kw, stride, padding, "depthwise_conv2d", "width")
    _report("depthwise_conv2d", 2 * c * kh * kw * ho * wo * n)

    xp = _pad(x.data, padding)
    wd = weight.data
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] * wd[None, :, 0, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * wd[None, :, 0, i, j, None, None]
            gx = gp[:, :, padding : padding + h, padding : padding + w] if padding else gp
        if weight.requires_grad:
            gw = np.empty_like(wd)
            for i in range(kh):
                for j in range(kw):
                    win = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", win, g)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw)


# ----------------------------------------------------------------- resize


def _interp_matrix(n_in: int, n_out: int, dtype) -> sparse.csr_matrix:
    """Half-pixel-centre linear interpolation matrix of shape (n_out, n_in)."""
    ratio = n_in / n_out
    src = (np.arange(n_out) + 0.5) * ratio - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.concatenate([np.arange(n_out), np.arange(n_out)])
    cols = np.concatenate([i0, i1])
    vals = np.concatenate([1.0 - frac, frac]).astype(dtype)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))


def _apply_axis(m: sparse.csr_matrix, d: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(d, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    res = np.asarray(m @ flat).reshape((m.shape[0],) + moved.shape[1:])
    return np.moveaxis(res, 0, axis)


def bilinear_resize(x: Tensor, scale: float) -> Tensor:
    """Bilinear resampling with half-pixel centres (align_corners=False)."""
    _require_4d(x, "bilinear_resize")
    if scale not in (0.5, 2, 2.0):
        raise ValueError(f"bilinear_resize: scale must be 1/2 or 2, got {scale}")
    n, c, h, w = x.shape
    ho, wo = int(round(h * scale)), int(round(w * scale))
    if ho < 1 or wo < 1:
        raise ShapeError(f"bilinear_resize: output size {(ho, wo)} is degenerate for input {(h, w)}")
    _report("bilinear_resize", 8 * n * c * ho * wo)
    mh = _interp_matrix(h, ho, x.dtype)
    mw = _interp_matrix(w, wo, x.dtype)
    out = _apply_axis(mw, _apply_axis(mh, x.data, 2), 3).astype(x.dtype, copy=False)

    def bw(g):
        gx = _apply_axis(mw.T.tocsr(), _apply_axis(mh.T.tocsr(), g, 2), 3)
        return (gx.astype(x.dtype, copy=False),)

    return _result(np.ascontiguousarray(out), (x,), bw)


# ------------------------------------------------------------ batch norm


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation; updates running statistics in place when training."""
    _require_4d(x, "batch_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine params must be ({c},)")
    _report("batch_norm", 2 * x.size)
    d = x.data
    g_ = gamma.data[None, :, None, None]
    if training:
        mu = d.mean(axis=(0, 2, 3), keepdims=True, dtype=d.dtype)
        var = d.var(axis=(0, 2, 3), keepdims=True, dtype=d.dtype)
        m = d.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(-1) * (m / max(m - 1, 1))
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(d.dtype)
        var = running_var.reshape(1, c, 1, 1).astype(d.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (d - mu) * inv
    out = xhat * g_ + beta.data[None, :, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * g_
        if training:
            m = d.size // c
            gx = inv / m * (m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv
        return gx, gg, gb

    return _result(out.astype(d.dtype, copy=False), (x, gamma, beta), bw)
