"""
Minimal reverse-mode differentiable tensor on top of numpy.

Every operation records the tensors it depends on and a ``grad_fn`` closure
mapping the output gradient to one gradient per dependency. ``backward``
walks the graph in reverse topological order. All data is float64.
"""

import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from utils.exceptions import InvalidArgumentError

logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union['Tensor', np.ndarray, float, int]

_INV_SQRT_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """An n-d float64 array with optional gradient tracking"""

    # Let numpy defer binary operators to Tensor
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 depends_on: Tuple['Tensor', ...] = (), grad_fn: Optional[GradFn] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._depends_on = depends_on
        self._grad_fn = grad_fn

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def detach(self) -> 'Tensor':
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    # Operators
    def __add__(self, other: ArrayLike) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> 'Tensor':
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> 'Tensor':
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> 'Tensor':
        return div(other, self)

    def __neg__(self) -> 'Tensor':
        return neg(self)

    def __pow__(self, exponent: float) -> 'Tensor':
        return power(self, exponent)

    def __matmul__(self, other: ArrayLike) -> 'Tensor':
        return matmul(self, other)

    def __getitem__(self, index) -> 'Tensor':
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_op(data: np.ndarray, depends_on: Sequence[Tensor], grad_fn: GradFn) -> Tensor:
    """Wrap an operation result; the graph is only recorded when a dependency needs gradients"""
    if any(t.requires_grad for t in depends_on):
        return Tensor(data, requires_grad=True, depends_on=tuple(depends_on), grad_fn=grad_fn)
    return Tensor(data)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidArgumentError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# Elementwise arithmetic

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def grad_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
    return make_op(a.data + b.data, (a, b), grad_fn)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def grad_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)
    return make_op(a.data - b.data, (a, b), grad_fn)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def grad_fn(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)
    return make_op(a.data * b.data, (a, b), grad_fn)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def grad_fn(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)
    return make_op(out, (a, b), grad_fn)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def grad_fn(g):
        return (g * exponent * a.data ** (exponent - 1.0),)
    return make_op(a.data ** exponent, (a,), grad_fn)


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log10(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return make_op(np.log10(a.data), (a,), lambda g: (g / (a.data * math.log(10.0)),))


def absolute(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def gelu(a: ArrayLike) -> Tensor:
    """Exact GELU x * Phi(x)"""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
    return make_op(a.data * cdf, (a,), lambda g: (g * (cdf + a.data * pdf),))


# Reductions

def tensor_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return make_op(out, (a,), grad_fn)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tensor_sum(a, axis, keepdims) * (1.0 / count)


def softmax(a: ArrayLike) -> Tensor:
    """Softmax over the last axis"""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return make_op(out, (a,), grad_fn)


# Linear algebra

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting on the rest)"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InvalidArgumentError(f"matmul: shapes {a.shape} and {b.shape} are not compatible")
    try:
        out = a.data @ b.data
    except ValueError:
        raise InvalidArgumentError(f"matmul: shapes {a.shape} and {b.shape} are not compatible") from None

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)
    return make_op(out, (a, b), grad_fn)


# Shape manipulation

def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise InvalidArgumentError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return make_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    perm = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(perm) != list(range(a.ndim)):
        raise InvalidArgumentError(f"transpose: {perm} is not a permutation of the axes of {a.shape}")
    inverse = tuple(np.argsort(perm))
    return make_op(a.data.transpose(perm), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        if basic:
            # basic indexing never repeats an element
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)
    return make_op(np.array(out), (a,), grad_fn)


def take(a: ArrayLike, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass"""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    out = np.take(a.data, idx, axis=axis)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        selector = [slice(None)] * a.ndim
        selector[axis] = idx
        np.add.at(full, tuple(selector), g)
        return (full,)
    return make_op(out, (a,), grad_fn)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError:
        shapes = [t.shape for t in parts]
        raise InvalidArgumentError(f"concat: shapes {shapes} disagree off axis {axis}") from None
    boundaries = np.cumsum([t.shape[axis] for t in parts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, boundaries, axis=axis))
    return make_op(out, tuple(parts), grad_fn)


# Convolutions on [..., seq, channels] inputs

def conv_output_length(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def conv1d(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    1-D convolution of ``x`` [..., n, Cin] with ``weight`` [Cout, Cin, k].

    Output length is floor((n + 2 * padding - k) / stride) + 1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 3 or x.ndim < 2 or x.shape[-1] != weight.shape[1]:
        raise InvalidArgumentError(f"conv1d: input {x.shape} and weight {weight.shape} are not compatible")
    n, kernel = x.shape[-2], weight.shape[2]
    length = conv_output_length(n, kernel, stride, padding)
    if length < 1:
        raise InvalidArgumentError(
            f"conv1d: input {x.shape} too short for kernel {kernel}, stride {stride}, padding {padding}"
        )

    pad_width = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (0, 0)]
    padded = np.pad(x.data, pad_width)
    span = stride * (length - 1) + 1
    # cols[..., t, j, c] = padded[..., t * stride + j, c]
    cols = np.stack([padded[..., j:j + span:stride, :] for j in range(kernel)], axis=-2)
    out = np.einsum('...tjc,ocj->...to', cols, weight.data)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def grad_fn(g):
        g_cols = np.einsum('...to,ocj->...tjc', g, weight.data)
        g_padded = np.zeros_like(padded)
        for j in range(kernel):
            g_padded[..., j:j + span:stride, :] += g_cols[..., j, :]
        gx = g_padded[..., padding:padding + n, :]
        gw = np.einsum('...to,...tjc->ocj', g, cols)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return grads
    return make_op(out, tuple(parents), grad_fn)


def conv_transpose1d(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """
    Transposed 1-D convolution of ``x`` [..., n, Cin] with ``weight`` [Cin, Cout, k].

    Output length is (n - 1) * stride + k - 2 * padding.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 3 or x.ndim < 2 or x.shape[-1] != weight.shape[0]:
        raise InvalidArgumentError(
            f"conv_transpose1d: input {x.shape} and weight {weight.shape} are not compatible"
        )
    n, kernel, c_out = x.shape[-2], weight.shape[2], weight.shape[1]
    full_length = (n - 1) * stride + kernel
    length = full_length - 2 * padding
    if length < 1:
        raise InvalidArgumentError(f"conv_transpose1d: padding {padding} crops the whole output")

    span = stride * (n - 1) + 1
    full = np.zeros(x.shape[:-2] + (full_length, c_out), dtype=np.float64)
    for j in range(kernel):
        full[..., j:j + span:stride, :] += x.data @ weight.data[:, :, j]
    out = full[..., padding:padding + length, :]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def grad_fn(g):
        g_full = np.zeros(full.shape, dtype=np.float64)
        g_full[..., padding:padding + length, :] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(weight.data)
        for j in range(kernel):
            g_slice = g_full[..., j:j + span:stride, :]
            gx += g_slice @ weight.data[:, :, j].T
            gw[:, :, j] = np.einsum('...tc,...to->co', x.data, g_slice)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return grads
    return make_op(np.array(out), tuple(parents), grad_fn)


# Reverse pass

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
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
        for parent in node._depends_on:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires gradients.

    Gradients add to whatever ``.grad`` already holds; call ``zero_grad`` to reset.
    """
    if loss.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        logger.debug("backward called on a tensor without gradient tracking")
        return

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            node.grad = np.array(grad, dtype=np.float64) if node.grad is None else node.grad + grad
            continue
        parent_grads = node._grad_fn(grad)
        for parent, parent_grad in zip(node._depends_on, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
