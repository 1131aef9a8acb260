"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Every operation records its parents and a local gradient rule on the output
tensor. :func:`backward` walks the recorded graph once in reverse topological
order and accumulates gradients into the leaves that have ``requires_grad``.

Feature maps are 4-axis ``(batch, channels, height, width)`` arrays; bias
and parameter vectors may have fewer axes. Arithmetic runs in the dtype of the
inputs, which is float32 unless the caller builds float64 tensors for
gradient checking.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # Operators delegate to the module-level ops below.
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

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


DiffNode = Tensor
"""A tensor that carries a recorded gradient rule is a node of the tape."""


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Record a custom operation.

    ``backward(g)`` receives the output gradient and returns one gradient (or
    None) per parent, each with that parent's shape.
    """
    return _result(data, tuple(parents), backward)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _result(a.data + b, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _result(a.data - b, (a,), lambda g: (g,))
    _check_same("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        k = b
        return _result(a.data * k, (a,), lambda g: (g * k,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same("multiply", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    _check_same("divide", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def power(a: Tensor, p: float) -> Tensor:
    """``a ** p`` for non-negative ``a``; the derivative at 0 is taken as 0."""
    ad = a.data
    out = ad**p

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(ad > 0, p * ad ** (p - 1.0), 0.0).astype(ad.dtype)
        return (g * d,)

    return _result(out, (a,), back)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # 1/(1+exp(-x)) evaluated without overflow for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    ad = a.data
    slope = np.where(ad >= 0, 1.0, alpha).astype(ad.dtype)
    return _result(ad * slope, (a,), lambda g: (g * slope,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _result(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {
    "add": add,
    "multiply": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def elementwise(kind: str, *operands: Tensor) -> Tensor:
    """Dispatch one of ``add``, ``multiply``, ``sigmoid``, ``tanh``, ``concat_channels``."""
    if kind == "concat_channels":
        return concat(operands, axis=1)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype, copy=True),)

    return _result(np.asarray(out), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(a.data[index], (a,), back)


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def split(a: Tensor, sections: int, axis: int = 1) -> list[Tensor]:
    """Split into equal sections along ``axis``."""
    n = a.shape[axis]
    if n % sections:
        raise ShapeError(f"split: extent {n} not divisible by {sections}")
    k = n // sections
    out = []
    for i in range(sections):
        index = [slice(None)] * a.ndim
        index[axis] = slice(i * k, (i + 1) * k)
        out.append(getitem(a, tuple(index)))
    return out


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Scale each (batch, channel) plane of ``x`` by ``s`` of shape (b, c, 1, 1)."""
    b, c = x.shape[:2]
    if s.shape != (b, c, 1, 1):
        raise ShapeError(f"channel_scale: scale shape {s.shape} does not match input {x.shape}")
    xd, sd = x.data, s.data
    return _result(
        xd * sd, (x, s), lambda g: (g * sd, np.sum(g * xd, axis=(2, 3), keepdims=True))
    )


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias vector to an NCHW tensor."""
    if bias.shape != (x.shape[1],):
        raise ShapeError(f"bias_add: bias shape {bias.shape} does not match input {x.shape}")
    return _result(
        x.data + bias.data[None, :, None, None],
        (x, bias),
        lambda g: (g, g.sum(axis=(0, 2, 3))),
    )


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


def avg_pool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 average pooling; spatial extents must be even."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial extent {(h, w)} must be even")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g):
        g = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (g * 0.25,)

    return _result(out, (x,), back)


# ---------------------------------------------------------------------------
# convolution and depth/space rearrangements
# ---------------------------------------------------------------------------


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of NCHW ``x`` with an ``(out, in, kh, kw)`` kernel.

    A 2-D ``(out, in)`` kernel is treated as 1x1.
    """
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D, got shape {x.shape}")
    k = kernel.data
    if k.ndim == 2:
        k = k[:, :, None, None]
    if k.ndim != 4 or k.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: kernel shape {kernel.shape} does not match input shape {x.shape}")
    o, c, kh, kw = k.shape
    b, _, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(
            f"conv2d: kernel shape {kernel.shape} does not fit padded input of shape {x.shape}"
        )
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    kshape = kernel.shape

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data if stride == 1 else x.data[:, :, ::stride, ::stride]
        xs = xs.reshape(b, c, oh * ow)
        km = k.reshape(o, c)
        out = np.matmul(km, xs).reshape(b, o, oh, ow)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def back1(g):
            g = g.reshape(b, o, oh * ow)
            gx = None
            if x.requires_grad:
                gs = np.matmul(km.T, g).reshape(b, c, oh, ow)
                if stride == 1:
                    gx = gs
                else:
                    gx = np.zeros(x.shape, dtype=x.dtype)
                    gx[:, :, ::stride, ::stride] = gs
            gk = np.matmul(g, xs.transpose(0, 2, 1)).sum(axis=0).reshape(kshape)
            gb = g.sum(axis=(0, 2)) if bias is not None else None
            return (gx, gk, gb)

        return _result(out, parents, back1)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col matrix: one row per output position, columns ordered (c, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    kmat = k.reshape(o, c * kh * kw)
    out = (cols @ kmat.T).reshape(b, oh, ow, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, o)
        gk = (gm.T @ cols).reshape(kshape)
        gx = None
        if x.requires_grad:
            gcols = (gm @ kmat).reshape(b, oh, ow, c, kh, kw)
            gxp = np.zeros((b, c, hp, wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gk, gb)

    return _result(out, parents, back)


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    b, c, h, w = a.shape
    out = a.reshape(b, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return out.reshape(b, c // (r * r), h * r, w * r)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    b, c, h, w = a.shape
    out = a.reshape(b, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return out.reshape(b, c * r * r, h // r, w // r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: ``out[b, c, h*r+i, w*r+j] = in[b, c*r*r + i*r + j, h, w]``."""
    if r < 1:
        raise ValueError(f"pixel_shuffle: factor must be positive, got {r}")
    if x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: channel extent {x.shape[1]} not divisible by {r * r}")
    return _result(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-depth, the exact inverse of :func:`pixel_shuffle`."""
    if r < 1:
        raise ValueError(f"pixel_unshuffle: factor must be positive, got {r}")
    if x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"pixel_unshuffle: spatial extent {x.shape[2:]} not divisible by {r}")
    return _result(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from each leaf that requires grad to the gradient computed
    by this call.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar-valued, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    if not root.requires_grad:
        return leaves
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def finite_diff_gradient(
    function: Callable[[np.ndarray], float], point, epsilon: float = 1e-3
) -> np.ndarray:
    """Central-difference estimate of the gradient of a scalar function."""
    x = np.array(point.data if isinstance(point, Tensor) else point, copy=True)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = float(flat[i])
        up = float(function(x))
        flat[i] = orig - epsilon
        lo = float(flat[i])
        down = float(function(x))
        flat[i] = orig
        # divide by the step actually representable in the point's dtype
        gflat[i] = (up - down) / (hi - lo)
    return grad.astype(x.dtype)
