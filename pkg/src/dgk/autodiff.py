"""Minimal dense reverse-mode autodiff over float64 numpy arrays.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  :func:`backward`
orders the recorded graph topologically (a :class:`Tape`) and replays it in
reverse.

Implicit broadcasting in binary ops is limited to trailing-dimension
expansion: the smaller operand's shape must equal the trailing dims of the
larger one (or be a scalar).  Anything else goes through :func:`broadcast_to`.

The function names follow numpy where one exists, so score-level code can be
written once and run on either arrays or tensors via :func:`backend`.
"""

from __future__ import annotations

import itertools
import json
from pathlib import Path

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "tape_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.tape_id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __neg__ = lambda self: mul(self, -1.0)
    __pow__ = lambda self, k: power(self, k)
    __getitem__ = lambda self, idx: getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    parents = tuple(parents)
    requires_grad = any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data, op=op)
    return Tensor(data, True, parents, backward_fn, op)


def _check_trailing(op, a, b):
    sa, sb = np.shape(a), np.shape(b)
    if sa == sb:
        return
    small, large = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) == 0 or large[len(large) - len(small):] == small:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} need trailing-dim expansion only")


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise binary
# ----------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("add", a.data, b.data)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("sub", a.data, b.data)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("mul", a.data, b.data)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("div", a.data, b.data)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), backward, "div")


def maximum(a, b):
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("maximum", a.data, b.data)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _node(out, (a, b), backward, "maximum")


def minimum(a, b):
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_trailing("minimum", a.data, b.data)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _node(out, (a, b), backward, "minimum")


# ----------------------------------------------------------------------------
# elementwise unary
# ----------------------------------------------------------------------------


def _unary(x, out, local_grad, op):
    x = as_tensor(x)

    def backward(g):
        return (g * local_grad(),)

    return _node(out, (x,), backward, op)


def power(x, k):
    x = as_tensor(x)
    if isinstance(k, Tensor):
        raise TypeError("power: exponent must be a constant")
    out = x.data ** k
    return _unary(x, out, lambda: k * x.data ** (k - 1), "power")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _unary(x, out, lambda: out, "exp")


def log(x):
    x = as_tensor(x)
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data, "log")


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _unary(x, out, lambda: 0.5 / out, "sqrt")


def abs(x):
    x = as_tensor(x)
    return _unary(x, np.abs(x.data), lambda: np.sign(x.data), "abs")


def clip(x, lo, hi):
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _unary(x, np.clip(x.data, lo, hi), lambda: inside.astype(np.float64), "clip")


def sigmoid(x):
    x = as_tensor(x)
    out = _np_sigmoid(x.data)
    return _unary(x, out, lambda: out * (1.0 - out), "sigmoid")


def relu(x):
    x = as_tensor(x)
    return _unary(x, np.maximum(x.data, 0.0), lambda: (x.data > 0).astype(np.float64), "relu")


# ----------------------------------------------------------------------------
# linear algebra and shape ops
# ----------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward, "matmul")


def concatenate(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shapes {[x.shape for x in xs]} on axis {axis}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, xs, backward, "concat")


concat = concatenate


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {x.shape} -> {shape}") from exc
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def expand_dims(x, axis):
    x = as_tensor(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


def swapaxes(x, a1, a2):
    x = as_tensor(x)
    out = np.swapaxes(x.data, a1, a2)
    return _node(out, (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _node(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(x, shape):
    """Explicit numpy-style expansion (size-1 and leading dims)."""
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {x.shape} -> {shape}") from exc
    return _node(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def getitem(x, idx):
    x = as_tensor(x)
    if isinstance(idx, Tensor):
        raise TypeError("getitem: index must be constant")
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out, copy=True), (x,), backward, "getitem")


def take(x, indices, axis=0):
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _node(out, (x,), backward, "take")


# ----------------------------------------------------------------------------
# reductions and normalisations
# ----------------------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if np.isscalar(axis) else axis
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    return _node(out, (x,), lambda g: (_expand_reduced(g, x.shape, axis, keepdims).copy(),), "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // (out.size or 1)

    def backward(g):
        return (_expand_reduced(g, x.shape, axis, keepdims) / n,)

    return _node(out, (x,), backward, "mean")


def max(x, axis=-1, keepdims=False):
    """Max along one axis; subgradient goes to the first argmax."""
    x = as_tensor(x)
    axis = axis % x.ndim
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(arg, axis), gk, axis=axis)
        return (full,)

    return _node(out, (x,), backward, "max")


def softmax(x, axis=-1):
    x = as_tensor(x)
    out = _np_softmax(x.data, axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward, "softmax")


def layernorm(x, eps=1e-10):
    """Normalise over the last axis (no affine part)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    out = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _node(out, (x,), backward, "layernorm")


# ----------------------------------------------------------------------------
# numpy twins used by the shared score-level code
# ----------------------------------------------------------------------------


def _np_sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _np_softmax(x, axis=-1):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


class _NumpyOps:
    """numpy plus the activation helpers numpy lacks."""

    sigmoid = staticmethod(lambda x: _np_sigmoid(np.asarray(x, dtype=np.float64)))
    relu = staticmethod(lambda x: np.maximum(x, 0.0))
    softmax = staticmethod(_np_softmax)
    concat = staticmethod(np.concatenate)

    @staticmethod
    def max(x, axis=-1, keepdims=False):
        return np.max(x, axis=axis, keepdims=keepdims)

    @staticmethod
    def layernorm(x, eps=1e-10):
        xc = x - x.mean(axis=-1, keepdims=True)
        return xc / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)

    def __getattr__(self, name):
        return getattr(np, name)


numpy_ops = _NumpyOps()


def backend(*xs):
    """This module if any argument is a Tensor, else the numpy namespace."""
    import sys

    if any(isinstance(x, Tensor) for x in xs):
        return sys.modules[__name__]
    return numpy_ops


def value(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ----------------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------------


class Tape:
    """Recorded nodes reachable from a root, in topological order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if node.tape_id in seen:
                continue
            seen.add(node.tape_id)
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and p.tape_id not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss, params=()):
    """Populate ``.grad`` on every tensor feeding ``loss``.

    ``params`` listed but unreachable from ``loss`` get zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    for p in params:
        p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    tape = Tape.from_root(loss)
    grads = {loss.tape_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.tape_id, None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(parent.tape_id)
            grads[parent.tape_id] = pg if prev is None else prev + pg


# ----------------------------------------------------------------------------
# optimiser and checkpoints
# ----------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay.

    p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
    """

    def __init__(self, params, lr=1e-4, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}; step aborted")
        self.t += 1
        b1, b2 = self.betas
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps) + lr * self.weight_decay * p.data


CKPT_FORMAT = "dgk-ckpt-v1"


def save_params(params, directory, extra=None):
    """Write ``params.bin`` (float64 little-endian) plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name in sorted(params):
        arr = np.ascontiguousarray(value(params[name]), dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.ravel())
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    (directory / "params.bin").write_bytes(blob.tobytes())
    manifest = {"format": CKPT_FORMAT, "dtype": "float64-le", "count": int(offset), "params": entries}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_params(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != CKPT_FORMAT:
        raise ValueError(f"not a {CKPT_FORMAT} checkpoint: {directory}")
    blob = np.frombuffer((directory / "params.bin").read_bytes(), dtype="<f8")
    if blob.size != manifest["count"]:
        raise ValueError(f"checkpoint blob has {blob.size} values, manifest says {manifest['count']}")
    params = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        params[e["name"]] = blob[e["offset"]: e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return params, manifest
