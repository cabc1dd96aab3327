"""Reverse-mode automatic differentiation on numpy arrays.

Every differentiable quantity in the renderer and the losses is built from
the primitives below. Each primitive works on plain ndarrays (returning an
ndarray) and on :class:`Tensor` nodes (returning a taped node), so the same
formula code serves both the fast forward path and the differentiable path.

Gradients are exact reverse-mode derivatives of the primitive composition.
All reductions run single-threaded in a fixed order, so repeated evaluations
are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteGradient, NonFiniteLoss

SMOOTH_ABS_EPS = 1e-12


class Tensor:
    """A node in the reverse-mode tape.

    ``value`` is a float64 ndarray (or scalar); ``parents`` holds
    ``(node, vjp)`` pairs where ``vjp`` maps the incoming cotangent to the
    parent's cotangent contribution.
    """

    __slots__ = ("value", "parents")

    # numpy must defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n):
        return power(self, n)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def val(x):
    """Underlying ndarray of ``x`` whether it is taped or not."""
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _is_taped(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    grad = np.asarray(grad, dtype=np.float64)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _lift(fwd, *vjps):
    """Build a primitive: numpy passthrough or taped node with given VJPs."""

    def op(*args):
        if not _is_taped(*args):
            return fwd(*(np.asarray(a, dtype=np.float64) for a in args))
        vals = [val(a) for a in args]
        out = fwd(*vals)
        parents = []
        for a, vjp in zip(args, vjps):
            if isinstance(a, Tensor) and vjp is not None:
                shape = a.value.shape
                parents.append(
                    (a, lambda g, vjp=vjp, vals=vals, out=out, shape=shape:
                     _unbroadcast(vjp(g, *vals, out), shape))
                )
        return Tensor(out, tuple(parents))

    return op


# -- arithmetic ---------------------------------------------------------
add = _lift(lambda a, b: a + b, lambda g, a, b, o: g, lambda g, a, b, o: g)
sub = _lift(lambda a, b: a - b, lambda g, a, b, o: g, lambda g, a, b, o: -g)
mul = _lift(lambda a, b: a * b, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)
div = _lift(
    lambda a, b: a / b,
    lambda g, a, b, o: g / b,
    lambda g, a, b, o: -g * a / (b * b),
)
neg = _lift(lambda a: -a, lambda g, a, o: -g)


def power(x, n):
    """x**n for a constant real exponent n."""
    n = float(n)
    return _lift(
        lambda a: a ** n,
        lambda g, a, o: g * n * a ** (n - 1.0),
    )(x)


def powpos(base, expo):
    """base**expo with base clamped at 0 (0 where base <= 0).

    Safe for shading terms like max(0, r.v)**delta: the gradient w.r.t. the
    exponent is 0 where the base is non-positive instead of NaN.
    """

    def fwd(a, b):
        pos = a > 0.0
        return np.where(pos, np.where(pos, a, 1.0) ** b, 0.0)

    def vjp_base(g, a, b, o):
        pos = a > 0.0
        return g * np.where(pos, b * np.where(pos, a, 1.0) ** (b - 1.0), 0.0)

    def vjp_expo(g, a, b, o):
        pos = a > 0.0
        return g * np.where(pos, o * np.log(np.where(pos, a, 1.0)), 0.0)

    return _lift(fwd, vjp_base, vjp_expo)(base, expo)


exp = _lift(np.exp, lambda g, a, o: g * o)
log = _lift(np.log, lambda g, a, o: g / a)
sqrt = _lift(np.sqrt, lambda g, a, o: g / (2.0 * o))


def _sigmoid_fwd(x):
    # Stable in both tails.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _sigmoid_fwd_any(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return np.float64(_sigmoid_fwd(x.reshape(1))[0])
    return _sigmoid_fwd(x)


sigmoid = _lift(_sigmoid_fwd_any, lambda g, a, o: g * o * (1.0 - o))

relu = _lift(
    lambda a: np.maximum(a, 0.0),
    lambda g, a, o: g * (a > 0.0),
)


def smooth_abs(x, eps=SMOOTH_ABS_EPS):
    """sqrt(x^2 + eps): differentiable |x| used by the Laplace terms/MAEs."""
    return _lift(
        lambda a: np.sqrt(a * a + eps),
        lambda g, a, o: g * a / o,
    )(x)


absolute = _lift(np.abs, lambda g, a, o: g * np.sign(a))

maximum = _lift(
    np.maximum,
    lambda g, a, b, o: g * (a >= b),
    lambda g, a, b, o: g * (a < b),
)
minimum = _lift(
    np.minimum,
    lambda g, a, b, o: g * (a <= b),
    lambda g, a, b, o: g * (a > b),
)


def softmax_pair(a, b, beta=8.0):
    """Smooth elementwise max via a stable two-term log-sum-exp."""
    m = maximum(a, b)
    return add(m, mul(1.0 / beta, log(add(exp(mul(beta, sub(a, m))),
                                           exp(mul(beta, sub(b, m)))))))


def softmin_pair(a, b, beta=8.0):
    return neg(softmax_pair(neg(a), neg(b), beta))


def clamp01(x):
    """Clamp to [0,1]; subgradient 0 outside the interval."""
    return _lift(
        lambda a: np.clip(a, 0.0, 1.0),
        lambda g, a, o: g * ((a > 0.0) & (a < 1.0)),
    )(x)


def where(cond, a, b):
    """Select by a boolean ndarray (the condition is never differentiated)."""
    cond = np.asarray(cond, dtype=bool)
    return _lift(
        lambda x, y: np.where(cond, x, y),
        lambda g, x, y, o: g * cond,
        lambda g, x, y, o: g * ~cond,
    )(a, b)


# -- reductions and shaping --------------------------------------------
def tsum(x, axis=None):
    def fwd(a):
        return a.sum(axis=axis)

    def vjp(g, a, o):
        if axis is None:
            return np.broadcast_to(g, a.shape).astype(np.float64)
        g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).astype(np.float64)

    return _lift(fwd, vjp)(x)


def tmean(x, axis=None):
    xv = val(x)
    n = xv.size if axis is None else xv.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / n)


def dot(a, b):
    """Row-wise dot product over the last axis."""
    return tsum(mul(a, b), axis=-1)


def norm(a):
    """Row-wise euclidean norm over the last axis."""
    return sqrt(dot(a, a))


def matmul(a, b):
    return _lift(
        lambda x, y: x @ y,
        lambda g, x, y, o: g @ y.T,
        lambda g, x, y, o: x.T @ g,
    )(a, b)


def cross(a, b):
    return _lift(
        lambda x, y: np.cross(x, y),
        lambda g, x, y, o: np.cross(y, g),
        lambda g, x, y, o: np.cross(g, x),
    )(a, b)


def reshape(x, shape):
    return _lift(
        lambda a: a.reshape(shape),
        lambda g, a, o: g.reshape(a.shape),
    )(x)


def take(x, key):
    """Basic/advanced indexing; gradient scatters back with accumulation."""

    def fwd(a):
        return a[key]

    def vjp(g, a, o):
        out = np.zeros_like(a)
        np.add.at(out, key, g)
        return out

    return _lift(fwd, vjp)(x)


def gather_rows(x, idx):
    idx = np.asarray(idx)
    return take(x, idx)


def put_rows(background, idx, values):
    """Copy of constant ``background`` with rows ``idx`` replaced by ``values``.

    ``idx`` must not contain duplicates (pixel indices never do).
    """
    bg = np.asarray(background, dtype=np.float64)
    idx = np.asarray(idx)

    def fwd(v):
        out = bg.copy()
        out[idx] = v
        return out

    def vjp(g, v, o):
        return g[idx]

    return _lift(fwd, vjp)(values)


def stack_cols(cols):
    """Stack 1-d arrays into columns of a 2-d array."""
    if not _is_taped(*cols):
        return np.stack([np.asarray(c, dtype=np.float64) for c in cols], axis=-1)
    vals = [val(c) for c in cols]
    out = np.stack(vals, axis=-1)
    parents = []
    for j, c in enumerate(cols):
        if isinstance(c, Tensor):
            parents.append((c, lambda g, j=j, shape=vals[j].shape:
                            _unbroadcast(g[..., j], shape)))
    return Tensor(out, tuple(parents))


def col(x, j):
    """Column j of a 2-d array as a 1-d array."""
    return take(x, (slice(None), j))


def concat(parts):
    """Concatenate 1-d arrays."""
    if not _is_taped(*parts):
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])
    vals = [val(p) for p in parts]
    out = np.concatenate(vals)
    parents = []
    off = 0
    for p, v in zip(parts, vals):
        n = v.shape[0]
        if isinstance(p, Tensor):
            parents.append((p, lambda g, s=off, e=off + n: g[s:e]))
        off += n
    return Tensor(out, tuple(parents))


# -- backward pass ------------------------------------------------------
def backward(out: Tensor, seed=1.0):
    """Cotangents of every node reachable from ``out``, keyed by id."""
    topo = []
    seen = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(out): np.asarray(seed, dtype=np.float64)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = np.asarray(contrib, dtype=np.float64)
    return grads


# -- parameter vectors --------------------------------------------------
@dataclass(frozen=True)
class ParamLayout:
    """Named, disjoint segments covering a flat parameter vector."""

    segments: tuple  # of (name, shape) pairs

    def __post_init__(self):
        names = [n for n, _ in self.segments]
        if len(set(names)) != len(names):
            raise ValueError("duplicate segment names")

    @property
    def size(self):
        return sum(int(np.prod(s)) for _, s in self.segments)

    def offsets(self):
        off = 0
        table = {}
        for name, shape in self.segments:
            n = int(np.prod(shape))
            table[name] = (off, off + n, tuple(np.atleast_1d(shape)))
            off += n
        return table

    def slice_of(self, name):
        start, stop, _ = self.offsets()[name]
        return slice(start, stop)

    def segment_of_index(self, i):
        for name, (start, stop, _) in self.offsets().items():
            if start <= i < stop:
                return name
        raise IndexError(i)

    def unpack(self, values):
        values = np.asarray(values, dtype=np.float64)
        out = {}
        for name, (start, stop, shape) in self.offsets().items():
            out[name] = values[start:stop].reshape(shape).copy()
        return out

    def pack(self, parts):
        out = np.empty(self.size, dtype=np.float64)
        for name, (start, stop, shape) in self.offsets().items():
            out[start:stop] = np.asarray(parts[name], dtype=np.float64).ravel()
        return out


@dataclass
class ParamVector:
    """A flat float64 vector plus the layout that names its segments."""

    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise ValueError(
                f"values shape {self.values.shape} does not match layout size "
                f"{self.layout.size}"
            )

    def unpack(self):
        return self.layout.unpack(self.values)

    def replace(self, values):
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    def copy(self):
        return ParamVector(self.values.copy(), self.layout)


def _leaves_for(pv: ParamVector):
    parts = pv.unpack()
    return {name: Tensor(arr) for name, arr in parts.items()}


def evaluate(objective, params: ParamVector) -> float:
    """Scalar value of ``objective`` at ``params``.

    Raises :class:`NonFiniteLoss` when the result is NaN/Inf. Intermediate
    overflow is silenced; the finiteness checks are the error channel.
    """
    leaves = _leaves_for(params)
    with np.errstate(all="ignore"):
        out = objective(leaves)
    loss = float(val(out))
    if not np.isfinite(loss):
        raise NonFiniteLoss()
    return loss


def gradient(objective, params: ParamVector):
    """(loss, grad) with grad aligned index-for-index with ``params``."""
    leaves = _leaves_for(params)
    with np.errstate(all="ignore"):
        out = objective(leaves)
        loss = float(val(out))
        if not np.isfinite(loss):
            raise NonFiniteLoss()
        grads = backward(out)
    flat = np.zeros(params.layout.size, dtype=np.float64)
    table = params.layout.offsets()
    for name, leaf in leaves.items():
        g = grads.get(id(leaf))
        start, stop, _ = table[name]
        if g is not None:
            flat[start:stop] = np.asarray(g, dtype=np.float64).ravel()
    if not np.all(np.isfinite(flat)):
        bad = np.where(~np.isfinite(flat))[0]
        segs = {params.layout.segment_of_index(int(i)) for i in bad}
        raise NonFiniteGradient(segs)
    return loss, flat


def finite_diff_check(objective, params: ParamVector, step, indices=None):
    """Per-index relative error between reverse-mode and central differences.

    Errors never raise; a mismatch simply shows up as a large value.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, g = gradient(objective, params)
    if indices is None:
        indices = range(params.layout.size)
    indices = list(indices)
    rel = np.empty(len(indices), dtype=np.float64)
    x = params.values
    for j, i in enumerate(indices):
        xp = x.copy()
        xp[i] += step
        xm = x.copy()
        xm[i] -= step
        try:
            fp = evaluate(objective, params.replace(xp))
            fm = evaluate(objective, params.replace(xm))
            fd = (fp - fm) / (2.0 * step)
            rel[j] = abs(g[i] - fd) / max(abs(g[i]), 1e-8)
        except NonFiniteLoss:
            rel[j] = np.inf
    return rel
