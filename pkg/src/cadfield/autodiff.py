"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Each op builds its output eagerly and, when any input requires a gradient,
attaches a closure mapping the output gradient to per-input gradients.
``Tensor.backward`` walks the recorded graph in reverse topological order.

Also home to the Adam update rule and the checkpoint file format.
"""

import contextlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionError,
    DoubleBackwardError,
    FormatError,
    InvalidInputError,
    NonFiniteError,
    OptimizerError,
)

_TINY = np.finfo(np.float64).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)

check_finite = True
_kink_log = None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self._consumed:
            raise DoubleBackwardError("backward() already ran on this loss; rebuild the graph")
        if self.data.size != 1:
            raise InvalidInputError(f"backward() needs a scalar loss, got shape {self.shape}")
        self._consumed = True
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=np.float64, copy=True).reshape(node.shape)
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root):
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def _node(data, parents, backward):
    # one reduction is cheaper than an elementwise mask; overflowing sums fall back
    if check_finite and not np.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {backward.__qualname__.split('.')[0]}")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


@contextlib.contextmanager
def kink_monitor():
    """Record the active-set masks of every relu/clip evaluated in the block.

    Two forward passes whose recorded masks are identical lie on the same
    smooth piece of the function.
    """
    global _kink_log
    previous, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = previous


def _log_kink(mask):
    if _kink_log is not None:
        _kink_log.append(mask.copy())


# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    sa, sb = a.shape, b.shape

    def add_backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), add_backward)


def subtract(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "subtract")
    sa, sb = a.shape, b.shape

    def subtract_backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.data - b.data, (a, b), subtract_backward)


def multiply(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "multiply")

    def multiply_backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), multiply_backward)


def divide(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "divide")
    out = a.data / b.data

    def divide_backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), divide_backward)


def negative(a):
    a = as_tensor(a)

    def negative_backward(g):
        return (-g,)

    return _node(-a.data, (a,), negative_backward)


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)

    def power_backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(a.data**p, (a,), power_backward)


# nonlinearities


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    _log_kink(mask)

    def relu_backward(g):
        return (g * mask,)

    return _node(a.data * mask, (a,), relu_backward)


def softplus(a):
    a = as_tensor(a)

    def softplus_backward(g):
        return (g * _sigmoid(a.data),)

    return _node(np.logaddexp(0.0, a.data), (a,), softplus_backward)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    """Logistic function, clipped so the output is strictly inside (0, 1)."""
    a = as_tensor(a)
    s = np.clip(_sigmoid(a.data), _TINY, _ONE_MINUS)

    def sigmoid_backward(g):
        return (g * s * (1.0 - s),)

    return _node(s, (a,), sigmoid_backward)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def exp_backward(g):
        return (g * out,)

    return _node(out, (a,), exp_backward)


def log(a):
    a = as_tensor(a)

    def log_backward(g):
        return (g / a.data,)

    return _node(np.log(a.data), (a,), log_backward)


def sin(a):
    a = as_tensor(a)

    def sin_backward(g):
        return (g * np.cos(a.data),)

    return _node(np.sin(a.data), (a,), sin_backward)


def cos(a):
    a = as_tensor(a)

    def cos_backward(g):
        return (-g * np.sin(a.data),)

    return _node(np.cos(a.data), (a,), cos_backward)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def sqrt_backward(g):
        return (g * 0.5 / out,)

    return _node(out, (a,), sqrt_backward)


def absolute(a):
    a = as_tensor(a)

    def absolute_backward(g):
        return (g * np.sign(a.data),)

    return _node(np.abs(a.data), (a,), absolute_backward)


def clip(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    _log_kink(inside)

    def clip_backward(g):
        return (g * inside,)

    return _node(np.clip(a.data, lo, hi), (a,), clip_backward)


def norm(a, axis=-1, keepdims=False):
    """Euclidean norm; the gradient at a zero vector is taken to be zero."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)

    def norm_backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.where(n > 0, a.data / safe, 0.0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _node(out, (a,), norm_backward)


# linear algebra and reductions


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def matmul_backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), matmul_backward)


def linear(x, w, b):
    """Fused ``x @ w + b`` for a 2-D batch ``x``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    out = x.data @ w.data
    out += b.data

    def linear_backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _node(out, (x, w, b), linear_backward)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def sum_backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), sum_backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def cumsum(a, axis=-1, exclusive=False):
    """Cumulative sum; ``exclusive`` drops the current element (starts at 0)."""
    a = as_tensor(a)
    axis = axis % a.ndim
    if exclusive:
        head = [slice(None)] * a.ndim
        head[axis] = slice(0, -1)
        zero_shape = list(a.shape)
        zero_shape[axis] = 1
        out = np.concatenate(
            [np.zeros(zero_shape), np.cumsum(a.data[tuple(head)], axis=axis)], axis=axis
        )
    else:
        out = np.cumsum(a.data, axis=axis)

    def cumsum_backward(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        if not exclusive:
            return (rev,)
        tail = [slice(None)] * g.ndim
        tail[axis] = slice(1, None)
        shifted = np.zeros_like(g)
        head = [slice(None)] * g.ndim
        head[axis] = slice(0, -1)
        shifted[tuple(head)] = rev[tuple(tail)]
        return (shifted,)

    return _node(out, (a,), cumsum_backward)


# shape manipulation


def reshape(a, shape):
    a = as_tensor(a)
    original = a.shape

    def reshape_backward(g):
        return (g.reshape(original),)

    return _node(a.data.reshape(shape), (a,), reshape_backward)


def broadcast_to(a, shape):
    a = as_tensor(a)
    original = a.shape

    def broadcast_backward(g):
        return (_unbroadcast(g, original),)

    return _node(np.broadcast_to(a.data, shape), (a,), broadcast_backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    inverse = None if axes is None else np.argsort(axes)

    def transpose_backward(g):
        return (np.transpose(g, inverse),)

    return _node(np.transpose(a.data, axes), (a,), transpose_backward)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def take(a, index):
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(index)

    def take_backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), take_backward)


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concatenate: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def concatenate_backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), concatenate_backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concatenate(expanded, axis=axis)


# optimizer


@dataclass
class OptimizerState:
    lr: float = 5e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)


def zero_grad(params):
    for p in params.values():
        p.zero_grad()


def adam_step(params, state, lr=None):
    """Bias-corrected Adam update, in place, over a ``name -> Tensor`` dict.

    Moments and bias-correction counters are kept per parameter name, so a
    group that starts updating late (the camera poses) gets a proper first
    step.
    """
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    for name, p in params.items():
        if p.grad is None:
            raise OptimizerError(f"parameter {name!r} has no gradient")
        if p.grad.shape != p.shape:
            raise OptimizerError(f"gradient shape {p.grad.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        t = state.counts.get(name, 0) + 1
        state.counts[name] = t
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.step += 1
    return params, state


# checkpoints

_MAGIC = b"CADFCKPT"


def save_checkpoint(path, arrays, step=0, meta=None):
    """Write named float64 arrays behind a JSON header; atomic via rename.

    Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
    header, then the arrays' raw little-endian bytes in header order.
    """
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.array(arrays[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"format": 1, "dtype": "float64", "step": int(step), "arrays": entries, "meta": meta or {}}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Return ``(arrays, header)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC or len(raw) < 16:
        raise FormatError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + n].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: bad checkpoint header: {exc}") from None
    body = raw[16 + n:]
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        chunk = body[start:start + 8 * count]
        if len(chunk) != 8 * count:
            raise FormatError(f"{path}: truncated array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(tuple(entry["shape"])).copy()
    return arrays, header
