"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: every operation returns a new :class:`Tensor` that remembers
its parents and a closure routing the output gradient back to them.
``Tensor.backward()`` runs one reverse topological sweep. Values keep the
dtype they were created with, so the same graph runs in float32 for training
and float64 for finite-difference checks.

Broadcasting follows numpy; gradients of broadcast operands are summed back
down to the operand's shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ValidationError

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` over the axes numpy broadcast to reach `grad.shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[Array], None] | None = None,
    ):
        if isinstance(data, np.ndarray):
            self.data = data
        else:
            arr = np.asarray(data)
            self.data = arr if arr.dtype.kind == "f" else arr.astype(np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- graph ---------------------------------------------------------
    def _accumulate(self, grad: Array) -> None:
        if grad.dtype != self.data.dtype:
            grad = grad.astype(self.data.dtype)
        if self.grad is None:
            # own the buffer: later accumulations create new arrays, but the
            # incoming gradient may be a view into someone else's data
            self.grad = grad.copy() if grad.base is not None else grad
        else:
            self.grad = self.grad + grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Array | None = None) -> None:
        """Backpropagate from this tensor (defaults to d(self)/d(self) = 1)."""
        if not self.requires_grad:
            raise ValidationError("backward() on a tensor that does not require gradients")
        if grad is None:
            if self.size != 1:
                raise ValidationError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(as_tensor(other), power(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data) -> Tensor:
    """A leaf tensor that receives gradients."""
    return Tensor(np.asarray(data), requires_grad=True)


# -- arithmetic ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValidationError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValidationError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor(out_data, parents=(a, b), backward=backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data ** exponent

    def backward(g: Array) -> None:
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return Tensor(out_data, parents=(a,), backward=backward)


# -- elementwise nonlinearities ------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g: Array) -> None:
        a._accumulate(g * out_data)

    return Tensor(out_data, parents=(a,), backward=backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g: Array) -> None:
        a._accumulate(g / a.data)

    return Tensor(out_data, parents=(a,), backward=backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g: Array) -> None:
        a._accumulate(g * (1.0 - out_data * out_data))

    return Tensor(out_data, parents=(a,), backward=backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # stable in both tails: exp of a non-positive argument only
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g: Array) -> None:
        a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor(out_data, parents=(a,), backward=backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g: Array) -> None:
        a._accumulate(g * (a.data > 0))

    return Tensor(out_data, parents=(a,), backward=backward)


def softplus(a) -> Tensor:
    """log(1 + exp(a)), stable for large |a|."""
    a = as_tensor(a)
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g: Array) -> None:
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        a._accumulate(g * s)

    return Tensor(out_data, parents=(a,), backward=backward)


def smooth_l1(a) -> Tensor:
    """Elementwise Huber-style penalty: 0.5 x**2 for |x| < 1 else |x| - 0.5."""
    a = as_tensor(a)
    x = a.data
    small = np.abs(x) < 1.0
    out_data = np.where(small, 0.5 * x * x, np.abs(x) - 0.5)

    def backward(g: Array) -> None:
        a._accumulate(g * np.clip(x, -1.0, 1.0))

    return Tensor(out_data, parents=(a,), backward=backward)


# -- shape & reductions ----------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g: Array) -> None:
        a._accumulate(g.reshape(a.shape))

    return Tensor(out_data, parents=(a,), backward=backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return Tensor(out_data, parents=(a,), backward=backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor(out_data, parents=tuple(tensors), backward=backward)


def take(a, *index_arrays) -> Tensor:
    """Advanced indexing on the leading axes: take(a, rows), take(a, rows, cols), ...

    Backward scatter-adds into the source (duplicate indices accumulate).
    """
    a = as_tensor(a)
    idx = tuple(np.asarray(ix) for ix in index_arrays)
    out_data = a.data[idx]

    def backward(g: Array) -> None:
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        a._accumulate(da)

    return Tensor(out_data, parents=(a,), backward=backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction for overflow safety."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array) -> None:
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - inner))

    return Tensor(out_data, parents=(a,), backward=backward)


def cross_entropy_logits(logits, targets) -> Tensor:
    """Per-row -log softmax(logits)[target], computed from logits (stable)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsumexp
    rows = np.arange(logits.shape[0])
    out_data = -logp[rows, targets]

    def backward(g: Array) -> None:
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        logits._accumulate(p * g[:, None])

    return Tensor(out_data, parents=(logits,), backward=backward)


# -- convolution -----------------------------------------------------------

def conv2d(x, weight, bias, stride: int = 1) -> Tensor:
    """2-d convolution on a single HxWxC image.

    `weight` has shape (kh, kw, c_in, c_out); padding is fixed at k//2 so the
    output spatial size is ceil(input / stride).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    h, w, c_in = x.shape
    kh, kw, wc_in, c_out = weight.shape
    if wc_in != c_in:
        raise ValidationError(f"conv2d channel mismatch: image has {c_in}, kernel expects {wc_in}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    windows = windows[::stride, ::stride]  # (ho, wo, c_in, kh, kw)
    ho, wo = windows.shape[:2]
    cols = windows.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * c_in)
    wmat = weight.data.reshape(kh * kw * c_in, c_out)
    out_data = (cols @ wmat + bias.data).reshape(ho, wo, c_out)

    def backward(g: Array) -> None:
        g2 = g.reshape(ho * wo, c_out)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if weight.requires_grad:
            weight._accumulate((cols.T @ g2).reshape(weight.shape))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(ho, wo, kh, kw, c_in)
            hp, wp = xp.shape[:2]
            oy = np.arange(ho) * stride
            ox = np.arange(wo) * stride
            yy = oy[:, None, None, None] + np.arange(kh)[None, None, :, None]
            xx = ox[None, :, None, None] + np.arange(kw)[None, None, None, :]
            flat = np.broadcast_to(yy * wp + xx, (ho, wo, kh, kw)).reshape(-1)
            vals = dcols.reshape(-1, c_in)
            dxp = np.empty((hp * wp, c_in), dtype=xp.dtype)
            for ch in range(c_in):
                dxp[:, ch] = np.bincount(flat, weights=vals[:, ch], minlength=hp * wp)
            dxp = dxp.reshape(hp, wp, c_in)
            dx = dxp[ph:ph + h, pw:pw + w] if (ph or pw) else dxp
            x._accumulate(dx)

    return Tensor(out_data, parents=(x, weight, bias), backward=backward)


# -- gradient-carrying parameters ------------------------------------------

def collect_parameters(obj) -> list[Tensor]:
    """Flatten tensors out of nested dict/list/dataclass-ish containers."""
    found: list[Tensor] = []

    def visit(v):
        if isinstance(v, Tensor):
            if v.requires_grad:
                found.append(v)
        elif isinstance(v, dict):
            for vv in v.values():
                visit(vv)
        elif isinstance(v, (list, tuple)):
            for vv in v:
                visit(vv)
        elif hasattr(v, "__dict__"):
            for vv in vars(v).values():
                visit(vv)

    visit(obj)
    return found


def zero_gradients(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
