"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a node on the output tensor holding its
inputs and a closure over the forward values it needs.  ``backward`` builds a
topologically ordered :class:`ComputationTape` from the loss and replays it in
reverse, accumulating gradients across fan-out.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=np.float64)
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

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
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, data={np.array2string(self.data, precision=4)})"

    # arithmetic sugar; the real work lives in the op functions below
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return swap_last(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], op: str, backward) -> Tensor:
    out = Tensor._wrap(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


@dataclass
class ComputationTape:
    """Nodes in topological order: every node's inputs precede it."""

    nodes: list[tuple[Node, Tensor]] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "ComputationTape":
        order: list[tuple[Node, Tensor]] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append((t._node, t))
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: ComputationTape | None = None) -> ComputationTape:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = ComputationTape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    held: dict[int, Tensor] = {id(loss): loss}
    for node, out in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        _accumulate(out, g)
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
                held[key] = inp
    # what is left belongs to leaves
    for key, g in grads.items():
        _accumulate(held[key], g)
    return tape


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64).reshape(t.shape)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), "mul",
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(out, (a, b), "div",
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _record(ad ** p, (a,), "pow", lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), "log", lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _record(out, (a,), "gelu", bw)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    ad = a.data
    keep = ad > lo
    return _record(np.where(keep, ad, lo), (a,), "clamp_min", lambda g: (g * keep,))


def relu(a: Tensor) -> Tensor:
    return clamp_min(a, 0.0)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _record(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    return _record(np.swapaxes(a.data, -1, -2), (a,), "swap_last",
                   lambda g: (np.swapaxes(g, -1, -2),))


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        raise TypeError("index with integers/arrays, not tensors")
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _record(np.array(a.data[idx]), (a,), "getitem", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat",
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(np.stack([t.data for t in tensors], axis=axis), tensors, "stack", bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _record(np.broadcast_to(a.data, shape).copy(), (a,), "broadcast_to",
                   lambda g: (_unbroadcast(g, src),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), "matmul", bw)


def det3(g: Tensor) -> Tensor:
    """Cofactor-expansion determinant over trailing 3x3 blocks."""
    if g.shape[-2:] != (3, 3):
        raise DimensionError(f"det3 needs trailing 3x3 blocks, got {g.shape}")
    m = g.data
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    d, e, f = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    h, i, j = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]
    cof = np.empty_like(m)
    cof[..., 0, 0] = e * j - f * i
    cof[..., 0, 1] = -(d * j - f * h)
    cof[..., 0, 2] = d * i - e * h
    cof[..., 1, 0] = -(b * j - c * i)
    cof[..., 1, 1] = a * j - c * h
    cof[..., 1, 2] = -(a * i - b * h)
    cof[..., 2, 0] = b * f - c * e
    cof[..., 2, 1] = -(a * f - c * d)
    cof[..., 2, 2] = a * e - b * d
    det = a * cof[..., 0, 0] + b * cof[..., 0, 1] + c * cof[..., 0, 2]
    return _record(det, (g,), "det3", lambda gr: (np.asarray(gr)[..., None, None] * cof,))


# ---------------------------------------------------------------------------
# fused neural-net ops
# ---------------------------------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record(y, (x,), "softmax",
                   lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _record(out, (x,), "log_softmax",
                   lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data
    n = xd.shape[-1]

    def bw(g):
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, (n,))
        gbias = _unbroadcast(g, (n,))
        return gx, ggain, gbias

    return _record(xhat * gd + bias.data, (x, gain, bias), "layer_norm", bw)


def bilinear_sample(feat: Tensor, points: Tensor) -> Tensor:
    """Sample ``feat[..., H, W, D]`` at normalized ``points[..., G, 2]``.

    Points are (row, col) pairs; -1 maps to the first pixel center and +1 to
    the last.  Out-of-range points are clamped to the border, where the
    gradient with respect to the point vanishes.
    """
    feat, points = as_tensor(feat), as_tensor(points)
    if feat.ndim < 3 or points.shape[-1] != 2:
        raise DimensionError(f"bilinear_sample: bad shapes {feat.shape}, {points.shape}")
    lead = feat.shape[:-3]
    if points.shape[:-2] != lead:
        raise DimensionError(f"bilinear_sample: leading dims differ {feat.shape} vs {points.shape}")
    H, W, D = feat.shape[-3:]
    G = points.shape[-2]
    N = int(np.prod(lead)) if lead else 1
    f = feat.data.reshape(N, H, W, D)
    p = points.data.reshape(N, G, 2)

    def axis_coords(v, size):
        scale = (size - 1) / 2.0
        c = (v + 1.0) * scale
        inside = (c > 0) & (c < size - 1)
        c = np.clip(c, 0.0, size - 1)
        i0 = np.minimum(np.floor(c), max(size - 2, 0)).astype(np.int64)
        i1 = np.minimum(i0 + 1, size - 1)
        w = c - i0
        return i0, i1, w, inside * scale

    y0, y1, wy, dyscale = axis_coords(p[..., 0], H)
    x0, x1, wx, dxscale = axis_coords(p[..., 1], W)
    n_idx = np.arange(N)[:, None]
    f00 = f[n_idx, y0, x0]
    f01 = f[n_idx, y0, x1]
    f10 = f[n_idx, y1, x0]
    f11 = f[n_idx, y1, x1]
    wy_, wx_ = wy[..., None], wx[..., None]
    w00 = (1 - wy_) * (1 - wx_)
    w01 = (1 - wy_) * wx_
    w10 = wy_ * (1 - wx_)
    w11 = wy_ * wx_
    out = w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11

    def bw(g):
        g = g.reshape(N, G, D)
        gf = np.zeros_like(f)
        np.add.at(gf, (n_idx, y0, x0), g * w00)
        np.add.at(gf, (n_idx, y0, x1), g * w01)
        np.add.at(gf, (n_idx, y1, x0), g * w10)
        np.add.at(gf, (n_idx, y1, x1), g * w11)
        d_dy = (1 - wx_) * (f10 - f00) + wx_ * (f11 - f01)
        d_dx = (1 - wy_) * (f01 - f00) + wy_ * (f11 - f10)
        gp = np.empty((N, G, 2))
        gp[..., 0] = (g * d_dy).sum(axis=-1) * dyscale
        gp[..., 1] = (g * d_dx).sum(axis=-1) * dxscale
        return gf.reshape(feat.shape), gp.reshape(points.shape)

    return _record(out.reshape(*lead, G, D), (feat, points), "bilinear_sample", bw)


def im2col3x3(x: Tensor, stride: int = 1) -> Tensor:
    """Zero-padded 3x3 patches of ``x[..., H, W, C]`` -> ``[..., Ho, Wo, 9*C]``.

    Patch layout is (ky, kx, c) flattened, matching a ``[3, 3, C, Cout]``
    kernel reshaped to ``[9*C, Cout]``.
    """
    lead = x.shape[:-3]
    H, W, C = x.shape[-3:]
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    pad = [(0, 0)] * len(lead) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x.data, pad)
    rows = (np.arange(Ho) * stride)[:, None] + np.arange(3)[None, :]  # Ho x 3
    cols = (np.arange(Wo) * stride)[:, None] + np.arange(3)[None, :]  # Wo x 3
    ri = rows[:, None, :, None]
    ci = cols[None, :, None, :]
    patches = xp[..., ri, ci, :]  # lead, Ho, Wo, 3, 3, C
    out = patches.reshape(*lead, Ho, Wo, 9 * C)

    def bw(g):
        g = g.reshape(*lead, Ho, Wo, 3, 3, C)
        gp = np.zeros((int(np.prod(lead)) if lead else 1, H + 2, W + 2, C))
        np.add.at(gp, (slice(None), ri, ci), g.reshape(-1, Ho, Wo, 3, 3, C))
        return (gp[:, 1:H + 1, 1:W + 1, :].reshape(x.shape),)

    return _record(out, (x,), "im2col3x3", bw)


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Channels-last 3x3 convolution with zero padding 1; ``weight`` is [3, 3, Cin, Cout]."""
    cin, cout = weight.shape[2], weight.shape[3]
    if x.shape[-1] != cin:
        raise DimensionError(f"conv3x3 channel mismatch: input {x.shape}, kernel {weight.shape}")
    out = matmul(im2col3x3(x, stride), reshape(weight, (9 * cin, cout)))
    if bias is not None:
        out = out + bias
    return out


def top_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries of a 1-D score vector, sorted ascending.

    Ties go to the smaller index.  Not differentiable.
    """
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64).ravel()
    if not 1 <= k <= s.size:
        raise ValueError(f"top_k needs 1 <= k <= {s.size}, got k={k}")
    order = np.argsort(-s, kind="stable")
    return np.sort(order[:k])
