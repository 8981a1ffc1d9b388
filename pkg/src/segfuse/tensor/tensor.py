"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records a closure that maps the output gradient to input gradients.
``Tensor.backward`` walks the graph in reverse topological order and
accumulates gradients into the leaves that have ``requires_grad`` set.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from segfuse.errors import ContractError, DomainError, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- graph traversal --------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
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

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    parents = tuple(parents)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- broadcasting ---------------------------------------------------------

def _check_broadcast(a: tuple, b: tuple) -> None:
    """Allow equal shapes, or one shape being a trailing suffix of the other."""
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


@contextlib.contextmanager
def record_kinks():
    """Collect the sign pattern of every ReLU input evaluated on this thread.

    Gradient checks use it to spot perturbations that move a ReLU input
    across zero, where central differences do not estimate the derivative.
    """
    prev = getattr(_state, "kinks", None)
    _state.kinks = []
    try:
        yield _state.kinks
    finally:
        _state.kinks = prev


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(mask)
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),))


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    return _result(x**exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1.0),))


_ELEMENTWISE = {"add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch one of ``add``, ``mul``, ``relu``, ``sigmoid`` by name."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise DomainError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("add", "mul"):
        if b is None:
            raise ContractError(f"{op_kind} needs two operands")
        return fn(a, b)
    return fn(as_tensor(a))


# -- reductions and shape ops ---------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis
        ):
            raise ShapeError(f"cannot concatenate shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared across the
    batch) or has the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


# -- convolution ----------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N, C*kh*kw, Ho*Wo) patch matrix."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    n, c = xp.shape[:2]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def _conv2d_core(x, w, bias, stride, pad_h, pad_w):
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects input (C,H,W) or (N,C,H,W) and kernels (O,C,kh,kw); got {x.shape}, {w.shape}")
    n, c, h, wd = xd.shape
    o, c_w, kh, kw = w.shape
    if c != c_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernels {w.shape}")
    if stride < 1 or pad_h < 0 or pad_w < 0:
        raise ShapeError(f"invalid stride {stride} / padding ({pad_h}, {pad_w})")
    hp, wp = h + 2 * pad_h, wd + 2 * pad_w
    if hp < kh or wp < kw:
        raise ShapeError(f"kernel {(kh, kw)} larger than padded input {(hp, wp)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w))) if (pad_h or pad_w) else xd
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError(f"conv bias shape {bias.shape} does not match {o} output channels")
        out += bias.data[:, None]
    out = out.reshape(n, o, ho, wo)
    wmat_t = wmat.T

    def backward(g):
        g3 = (g[None] if squeeze else g).reshape(n, o, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = None
        if x.requires_grad:
            if stride == 1:
                # full correlation of the padded output gradient with the flipped kernel
                gd = np.zeros((n, o, hp + kh - 1, wp + kw - 1))
                gd[:, :, kh - 1 : kh - 1 + ho, kw - 1 : kw - 1 + wo] = g3.reshape(n, o, ho, wo)
                flipped = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                dxp = np.matmul(flipped, _im2col(gd, kh, kw, 1, hp, wp)).reshape(n, c, hp, wp)
            else:
                # col2im: scatter each kernel tap's column gradient back onto the padded input
                dcols = np.matmul(wmat_t, g3).reshape(n, c, kh, kw, ho, wo)
                dxp = np.zeros((n, c, hp, wp))
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            gx = dxp[:, :, pad_h : pad_h + h, pad_w : pad_w + wd]
            if squeeze:
                gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out[0] if squeeze else out, parents, backward)


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x`` is (C,H,W) or (N,C,H,W); kernels are (O,C,k,k)."""
    return _conv2d_core(as_tensor(x), as_tensor(kernels), bias, stride, padding, padding)


def conv1d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation. ``x`` is (C,L) or (N,C,L); kernels are (O,C,k)."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim not in (2, 3) or kernels.ndim != 3:
        raise ShapeError(f"conv1d expects input (C,L) or (N,C,L) and kernels (O,C,k); got {x.shape}, {kernels.shape}")
    x4 = reshape(x, x.shape[:-1] + (1, x.shape[-1]))
    k4 = reshape(kernels, kernels.shape[:2] + (1, kernels.shape[2]))
    out = _conv2d_core(x4, k4, bias, stride, 0, padding)
    return reshape(out, out.shape[:-2] + (out.shape[-1],))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    if factor == 1:
        return x
    shape = x.shape
    data = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def backward(g):
        g = g.reshape(shape[:-2] + (shape[-2], factor, shape[-1], factor))
        return (g.sum(axis=(-3, -1)),)

    return _result(data, (x,), backward)


# -- normalisation --------------------------------------------------------

def softmax(t: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise DomainError(f"softmax temperature must be positive, got {temperature}")
    z = t.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((y * (g - (g * y).sum(axis=axis, keepdims=True))) / temperature,)

    return _result(y, (t,), backward)


def l2_normalize(t: Tensor, axis: int = -1, epsilon: float = 1e-8) -> Tensor:
    """Scale slices along ``axis`` to unit norm; slices shorter than ``epsilon`` are divided by it."""
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    x = t.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    small = norm < epsilon
    denom = np.where(small, epsilon, norm)
    y = x / denom

    def backward(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(small, g / epsilon, (g - y * proj) / denom),)

    return _result(y, (t,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply elementwise gain and shift."""
    x = as_tensor(x)
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm parameters {gain.shape}/{shift.shape} do not match feature size {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + shift.data, (x, gain, shift), backward)


# -- losses ---------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw scores, in the overflow-free form."""
    logits = as_tensor(logits)
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if logits.shape != y.shape:
        raise ShapeError(f"bce_with_logits shape mismatch: logits {logits.shape}, targets {y.shape}")
    if y.size and (y.min() < 0.0 or y.max() > 1.0):
        raise DomainError("bce_with_logits targets must lie in [0, 1]")
    x = logits.data
    n = x.size
    loss = (np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))).sum() / n
    return _result(np.array(loss), (logits,), lambda g: (g * (_sigmoid_np(x) - y) / n,))


# -- sampling -------------------------------------------------------------

def crop_bilinear(features: Tensor, top: Tensor, left: Tensor, height: int, width: int) -> Tensor:
    """Bilinearly sample an ``height`` x ``width`` window from (C,H,W) features.

    ``top``/``left`` are scalar tensors in grid units and must satisfy
    ``0 <= top <= H - height`` (same for ``left``). The result is
    differentiable in the features and in both offsets.
    """
    features, top, left = as_tensor(features), as_tensor(top), as_tensor(left)
    c, h, w = features.shape
    ty, tx = float(top.data), float(left.data)
    if not (0.0 <= ty <= h - height) or not (0.0 <= tx <= w - width):
        raise ShapeError(f"crop window {(height, width)} at ({ty:.3f}, {tx:.3f}) leaves grid {(h, w)}")
    y0, x0 = min(int(math.floor(ty)), h - height), min(int(math.floor(tx)), w - width)
    fy, fx = ty - y0, tx - x0
    fp = np.pad(features.data, ((0, 0), (0, 1), (0, 1)))
    a = fp[:, y0 : y0 + height, x0 : x0 + width]
    b = fp[:, y0 : y0 + height, x0 + 1 : x0 + 1 + width]
    cc = fp[:, y0 + 1 : y0 + 1 + height, x0 : x0 + width]
    d = fp[:, y0 + 1 : y0 + 1 + height, x0 + 1 : x0 + 1 + width]
    out = (1 - fy) * (1 - fx) * a + (1 - fy) * fx * b + fy * (1 - fx) * cc + fy * fx * d

    def backward(g):
        gf = np.zeros_like(fp)
        gf[:, y0 : y0 + height, x0 : x0 + width] += (1 - fy) * (1 - fx) * g
        gf[:, y0 : y0 + height, x0 + 1 : x0 + 1 + width] += (1 - fy) * fx * g
        gf[:, y0 + 1 : y0 + 1 + height, x0 : x0 + width] += fy * (1 - fx) * g
        gf[:, y0 + 1 : y0 + 1 + height, x0 + 1 : x0 + 1 + width] += fy * fx * g
        gy = (g * (-(1 - fx) * a - fx * b + (1 - fx) * cc + fx * d)).sum()
        gx = (g * (-(1 - fy) * a + (1 - fy) * b - fy * cc + fy * d)).sum()
        return gf[:, :h, :w], np.array(gy), np.array(gx)

    return _result(out, (features, top, left), backward)
