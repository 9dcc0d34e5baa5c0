"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def numeric_grad(f, arrays, eps=1e-6, entries=None):
    """d f / d arrays[i] by central differences; ``entries`` optionally limits to (i, flat_index) pairs."""
    grads = [np.zeros_like(a) for a in arrays]
    todo = entries if entries is not None else [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    for i, j in todo:
        a = arrays[i].reshape(-1)
        old = a[j]
        a[j] = old + eps
        hi = f(*arrays)
        a[j] = old - eps
        lo = f(*arrays)
        a[j] = old
        grads[i].reshape(-1)[j] = (hi - lo) / (2 * eps)
    return grads


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def check(fn, arrays, eps=1e-6, weights_seed=0):
    """Max relative error between autodiff and numeric gradients of sum(w * fn(*xs)).

    ``fn`` maps Tensors to a Tensor; a fixed random weighting turns it into a scalar.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out_shape = np.shape(ad.value(fn(*[ad.Tensor(a) for a in arrays])))
    w = np.random.default_rng(weights_seed).standard_normal(out_shape)

    def scalar(*xs):
        return float(np.sum(w * ad.value(fn(*[ad.Tensor(x) for x in xs]))))

    ts = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = ad.sum(fn(*ts) * w) if out_shape else fn(*ts) * float(w)
    ad.backward(loss, ts)
    num = numeric_grad(scalar, arrays, eps)
    return max(rel_error(t.grad, n) for t, n in zip(ts, num))


# ----------------------------------------------------------------------------
# instance generators for every differentiable primitive
# ----------------------------------------------------------------------------


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 2.0, size=shape)
    return x * rng.choice((-1.0, 1.0), size=shape)


def _shape(rng, ndim_lo=1, ndim_hi=3):
    return tuple(int(v) for v in rng.integers(1, 5, size=rng.integers(ndim_lo, ndim_hi + 1)))


def _clip_input(r, s):
    q = r.normal(size=s)
    return np.where(np.abs(np.abs(q) - 0.5) < 0.05, 0.0, q)  # keep off the clip corners


UNARY = {
    "exp": (ad.exp, lambda r, s: r.normal(size=s)),
    "log": (ad.log, lambda r, s: r.uniform(0.2, 3.0, size=s)),
    "sqrt": (ad.sqrt, lambda r, s: r.uniform(0.2, 3.0, size=s)),
    "abs": (ad.abs, _away_from_zero),
    "sigmoid": (ad.sigmoid, lambda r, s: 3 * r.normal(size=s)),
    "relu": (ad.relu, _away_from_zero),
    "power": (lambda x: ad.power(x, 3), lambda r, s: r.normal(size=s)),
    "clip": (lambda x: ad.clip(x, -0.5, 0.5), _clip_input),
    "softmax": (lambda x: ad.softmax(x, axis=-1), lambda r, s: r.normal(size=s)),
    # d=2 is degenerate (outputs are exactly +-1), so the last axis has >= 3 entries
    "layernorm": (ad.layernorm, lambda r, s: r.normal(size=s[:-1] + (max(s[-1], 3),))),
    "sum": (lambda x: ad.sum(x, axis=-1), lambda r, s: r.normal(size=s)),
    "mean": (lambda x: ad.mean(x, axis=0, keepdims=True), lambda r, s: r.normal(size=s)),
    "max": (lambda x: ad.max(x, axis=-1), lambda r, s: r.permutation(int(np.prod(s))).reshape(s) * 0.3),
    "expand_dims": (lambda x: ad.expand_dims(x, 0) * 2.0, lambda r, s: r.normal(size=s)),
    "transpose": (lambda x: ad.transpose(x), lambda r, s: r.normal(size=s)),
    "reshape": (lambda x: ad.reshape(x, (-1,)), lambda r, s: r.normal(size=s)),
    "getitem": (lambda x: x[..., :1] * x[..., -1:], lambda r, s: r.normal(size=s)),
    "take": (lambda x: ad.take(x, np.array([0, 0, x.shape[0] - 1]), axis=0), lambda r, s: r.normal(size=s)),
}

BINARY = {"add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": ad.div, "maximum": ad.maximum, "minimum": ad.minimum}


def _unary_cases(name, rng, n):
    fn, gen = UNARY[name]
    return [(fn, [gen(rng, _shape(rng))]) for _ in range(n)]


def _binary_cases(name, rng, n):
    out = []
    for i in range(n):
        s = _shape(rng, 2, 3)
        a = rng.normal(size=s)
        b = rng.normal(size=s[1:] if i % 2 else s)  # odd instances broadcast over the leading axis
        if name == "div":
            b = _away_from_zero(rng, b.shape, 0.5)
        if name in ("maximum", "minimum"):
            a = np.where(np.abs(a - np.broadcast_to(b, a.shape)) < 0.05, a + 0.3, a)
        out.append((BINARY[name], [a, b]))
    return out


def _matmul_cases(rng, n):
    out = []
    for i in range(n):
        a_n, k, m = (int(v) for v in rng.integers(1, 5, size=3))
        lead = tuple(int(v) for v in rng.integers(1, 3, size=i % 3))
        b = rng.normal(size=(k, m)) if i % 2 else rng.normal(size=lead + (k, m))
        out.append((ad.matmul, [rng.normal(size=lead + (a_n, k)), b]))
    return out


def _shape_cases(name, rng, n):
    out = []
    for _ in range(n):
        r, d1, d2 = (int(v) for v in rng.integers(1, 5, size=3))
        a, b = rng.normal(size=(r, d1)), rng.normal(size=(r, d2))
        if name == "concatenate":
            out.append((lambda x, y: ad.concatenate([x, y], axis=-1), [a, b]))
        elif name == "swapaxes":
            out.append((lambda x: ad.swapaxes(x, 0, 1), [a]))
        else:
            out.append((lambda x, s=(3, r, d1): ad.broadcast_to(ad.expand_dims(x, 0), s), [a]))
    return out


OP_NAMES = tuple(sorted(list(UNARY) + list(BINARY) + ["matmul", "concatenate", "swapaxes", "broadcast_to"]))


def op_cases(name, n=20, seed=0):
    """``n`` random (fn, inputs) instances for primitive ``name``; inputs avoid kinks."""
    rng = np.random.default_rng([seed, OP_NAMES.index(name)])
    if name in UNARY:
        return _unary_cases(name, rng, n)
    if name in BINARY:
        return _binary_cases(name, rng, n)
    if name == "matmul":
        return _matmul_cases(rng, n)
    return _shape_cases(name, rng, n)


def check_op(name, n=20, seed=0):
    """Worst relative error over ``n`` instances of one primitive."""
    return max(check(fn, xs, weights_seed=i) for i, (fn, xs) in enumerate(op_cases(name, n, seed)))
