"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation is looked up by name in :data:`OPS` and appended to a
:class:`Tape`.  Backward walks the tape in strict reverse append order, so
topological order is simply recording order.

    >>> tape = Tape()
    >>> x = tape.leaf([1.0, 2.0, 3.0], name="x")
    >>> grads = tape.backward((x * x).sum())
    >>> grads[x]
    array([2., 4., 6.])

Non-smooth points use deterministic subgradients: ``abs`` has slope 0 at the
origin, and ``maximum``/``minimum``/``relu``/``max``/``min`` route the whole
gradient to the first attaining argument.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ShapeError, TapeError


@dataclass(frozen=True)
class OpDef:
    kind: str
    forward: Callable
    backward: Callable
    arity: int | None = None  # None means variadic
    returns_ctx: bool = False


OPS: dict[str, OpDef] = {}


def register_op(kind, forward, backward, arity=None, returns_ctx=False):
    """Register an op kind.

    ``forward(*arrays, **attrs)`` returns the output array (or ``(out, ctx)``
    when ``returns_ctx``).  ``backward(ctx, g, out, *arrays, **attrs)`` returns
    one gradient (or ``None``) per input.
    """
    if kind in OPS:
        raise ValueError(f"op kind {kind!r} already registered")
    OPS[kind] = OpDef(kind, forward, backward, arity, returns_ctx)
    return OPS[kind]


class _Node:
    __slots__ = ("kind", "inputs", "out", "opdef", "attrs", "ctx", "value")

    def __init__(self, kind, inputs, out, opdef, attrs, ctx, value):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.opdef = opdef
        self.attrs = attrs
        self.ctx = ctx
        self.value = value


class DiffValue:
    """An array on a tape.  Data is never mutated after creation."""

    __slots__ = ("data", "tape", "node", "requires_grad", "grad", "name", "__weakref__")

    __array_ufunc__ = None

    def __init__(self, data, tape=None, node=None, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"DiffValue{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __add__(self, other):
        return record("add", [self, other])

    def __radd__(self, other):
        return record("add", [other, self])

    def __sub__(self, other):
        return record("sub", [self, other])

    def __rsub__(self, other):
        return record("sub", [other, self])

    def __mul__(self, other):
        return record("mul", [self, other])

    def __rmul__(self, other):
        return record("mul", [other, self])

    def __truediv__(self, other):
        return record("div", [self, other])

    def __rtruediv__(self, other):
        return record("div", [other, self])

    def __neg__(self):
        return record("neg", [self])

    def __pow__(self, p):
        return record("pow", [self], p=float(p))

    def __matmul__(self, other):
        return record("matmul", [self, other])

    def __rmatmul__(self, other):
        return record("matmul", [other, self])

    def __getitem__(self, index):
        return record("getitem", [self], index=index)

    def sum(self, axis=None, keepdims=False):
        return record("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return record("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return record("reshape", [self], shape=tuple(shape))

    @property
    def T(self):
        return record("transpose", [self], axes=None)


def as_value(x):
    if isinstance(x, DiffValue):
        return x
    return DiffValue(x)


class Tape:
    """Append-only list of operation records owned by one fitting session."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, data, name=None, requires_grad=True):
        v = DiffValue(np.array(data, dtype=np.float64), tape=self, requires_grad=requires_grad, name=name)
        if requires_grad:
            v.node = len(self.nodes)
            self.nodes.append(_Node("leaf", (), v.data, None, {}, None, v))
        return v

    def constant(self, data, name=None):
        return DiffValue(np.asarray(data, dtype=np.float64), tape=self, name=name)

    def _append(self, kind, inputs, out, opdef, attrs, ctx):
        v = DiffValue(out, tape=self, requires_grad=True)
        v.node = len(self.nodes)
        self.nodes.append(_Node(kind, tuple(inputs), out, opdef, attrs, ctx, None))
        return v

    def reset(self):
        self.nodes.clear()

    def backward(self, root):
        """Populate ``.grad`` of every requires-grad leaf reachable from ``root``.

        Gradients accumulate into ``leaf.grad`` across repeated calls; call
        :meth:`zero_grad` (or build a fresh tape) between passes.
        Returns ``{leaf: grad}`` for every leaf on the tape.
        """
        root = as_value(root)
        if root.data.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {root.data.shape}")
        if root.tape is not None and root.tape is not self:
            raise TapeError("backward: root belongs to a different tape")
        grads: list = [None] * len(self.nodes)
        if root.requires_grad:
            grads[root.node] = np.ones_like(root.data)
        leaves = {}
        for i in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[i]
            if node.kind == "leaf":
                leaf = node.value
                g = grads[i]
                if g is None:
                    g = np.zeros_like(leaf.data)
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
                leaves[leaf] = leaf.grad
                continue
            g = grads[i]
            if g is None:
                continue
            xs = [inp.data for inp in node.inputs]
            in_grads = node.opdef.backward(node.ctx, g, node.out, *xs, **node.attrs)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                ig = np.asarray(ig, dtype=np.float64)
                if ig.shape != inp.data.shape:
                    ig = _unbroadcast(ig, inp.data.shape)
                j = inp.node
                grads[j] = ig if grads[j] is None else grads[j] + ig
        return leaves

    def zero_grad(self):
        for node in self.nodes:
            if node.kind == "leaf":
                node.value.grad = None


def _common_tape(values, kind):
    tape = None
    for v in values:
        if v.tape is None:
            continue
        if tape is None:
            tape = v.tape
        elif v.tape is not tape:
            raise TapeError(f"{kind}: inputs live on different tapes")
    return tape


def record(kind, inputs, **attrs):
    """Apply op ``kind`` to ``inputs`` and append its backward rule to the tape."""
    try:
        opdef = OPS[kind]
    except KeyError:
        raise TapeError(f"unknown op kind {kind!r}") from None
    values = [as_value(x) for x in inputs]
    if opdef.arity is not None and len(values) != opdef.arity:
        raise ShapeError(f"{kind}: expected {opdef.arity} inputs, got {len(values)}")
    tape = _common_tape(values, kind)
    arrays = [v.data for v in values]
    try:
        with np.errstate(all="ignore"):
            res = opdef.forward(*arrays, **attrs)
    except (ValueError, IndexError) as exc:
        shapes = ", ".join(str(a.shape) for a in arrays)
        raise ShapeError(f"{kind}: incompatible input shapes [{shapes}]: {exc}") from None
    ctx = None
    if opdef.returns_ctx:
        res, ctx = res
    out = np.asarray(res, dtype=np.float64)
    if tape is None or not any(v.requires_grad for v in values):
        return DiffValue(out, tape=tape)
    return tape._append(kind, values, out, opdef, attrs, ctx)


def detach(v):
    """Same data, cut from the graph."""
    v = as_value(v)
    return DiffValue(v.data, tape=v.tape, requires_grad=False, name=v.name)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise binary


def _binary(kind, fwd, bwd):
    def forward(a, b):
        _check_broadcast(kind, a, b)
        return fwd(a, b)

    register_op(kind, forward, bwd, arity=2)


_binary("add", np.add, lambda c, g, o, a, b: (g, g))
_binary("sub", np.subtract, lambda c, g, o, a, b: (g, -g))
_binary("mul", np.multiply, lambda c, g, o, a, b: (g * b, g * a))
_binary("div", np.divide, lambda c, g, o, a, b: (g / b, -g * a / (b * b)))


def _arctan2_bwd(c, g, o, y, x):
    r2 = x * x + y * y
    return g * x / r2, -g * y / r2


_binary("arctan2", np.arctan2, _arctan2_bwd)


def _maximum_bwd(c, g, o, a, b):
    first = a >= b
    return g * first, g * ~first


def _minimum_bwd(c, g, o, a, b):
    first = a <= b
    return g * first, g * ~first


_binary("maximum", np.maximum, _maximum_bwd)
_binary("minimum", np.minimum, _minimum_bwd)


# ---------------------------------------------------------------------------
# elementwise unary

register_op("neg", np.negative, lambda c, g, o, a: (-g,), arity=1)
register_op("abs", np.abs, lambda c, g, o, a: (g * np.sign(a),), arity=1)
register_op("exp", np.exp, lambda c, g, o, a: (g * o,), arity=1)
register_op("log", np.log, lambda c, g, o, a: (g / a,), arity=1)
register_op("sqrt", np.sqrt, lambda c, g, o, a: (g / (2.0 * o),), arity=1)
register_op("sin", np.sin, lambda c, g, o, a: (g * np.cos(a),), arity=1)
register_op("cos", np.cos, lambda c, g, o, a: (-g * np.sin(a),), arity=1)
register_op("tanh", np.tanh, lambda c, g, o, a: (g * (1.0 - o * o),), arity=1)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


register_op("sigmoid", _sigmoid, lambda c, g, o, a: (g * o * (1.0 - o),), arity=1)
# clamp-at-zero; the tie at 0 goes to the input (first argument of max(x, 0))
register_op("relu", lambda a: np.maximum(a, 0.0), lambda c, g, o, a: (g * (a >= 0.0),), arity=1)
register_op("pow", lambda a, p: np.power(a, p), lambda c, g, o, a, p: (g * p * np.power(a, p - 1.0),), arity=1)


# ---------------------------------------------------------------------------
# reductions


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


register_op(
    "sum",
    lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
    lambda c, g, o, a, axis=None, keepdims=False: (_expand(g, a.shape, axis, keepdims).copy(),),
    arity=1,
)


def _mean_bwd(c, g, o, a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return (_expand(g, a.shape, axis, keepdims) / n,)


register_op("mean", lambda a, axis=None, keepdims=False: np.mean(a, axis=axis, keepdims=keepdims), _mean_bwd, arity=1)


def _argext_fwd(pick):
    def forward(a, axis=None):
        if a.size == 0:
            raise ValueError("reduction over empty array")
        idx = pick(a, axis=axis)
        if axis is None:
            return a.reshape(-1)[idx], idx
        return np.take_along_axis(a, np.expand_dims(idx, axis), axis).squeeze(axis), idx

    return forward


def _argext_bwd(c, g, o, a, axis=None):
    out = np.zeros_like(a)
    if axis is None:
        out.reshape(-1)[c] = g
    else:
        np.put_along_axis(out, np.expand_dims(c, axis), np.expand_dims(g, axis), axis)
    return (out,)


# np.argmax/argmin return the first attaining index, which fixes tie routing
register_op("max", _argext_fwd(np.argmax), _argext_bwd, arity=1, returns_ctx=True)
register_op("min", _argext_fwd(np.argmin), _argext_bwd, arity=1, returns_ctx=True)


def _lse_fwd(a, axis=None, temperature=1.0):
    m = np.max(a, axis=axis, keepdims=True)
    e = np.exp((a - m) / temperature)
    s = np.sum(e, axis=axis, keepdims=True)
    out = m + temperature * np.log(s)
    w = e / s
    if axis is None:
        return out.reshape(()), w
    return np.squeeze(out, axis=axis), w


def _lse_bwd(w, g, o, a, axis=None, temperature=1.0):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (g * w,)


register_op("logsumexp", _lse_fwd, _lse_bwd, arity=1, returns_ctx=True)


# ---------------------------------------------------------------------------
# linear algebra and structure


def _matmul_fwd(a, b):
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError("matmul supports 1-D and 2-D operands only")
    return np.matmul(a, b)


def _matmul_bwd(c, g, o, a, b):
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


register_op("matmul", _matmul_fwd, _matmul_bwd, arity=2)
register_op("reshape", lambda a, shape: np.reshape(a, shape), lambda c, g, o, a, shape: (g.reshape(a.shape),), arity=1)


def _transpose_bwd(c, g, o, a, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return (np.transpose(g, inv),)


register_op("transpose", lambda a, axes=None: np.transpose(a, axes), _transpose_bwd, arity=1)


def _is_basic(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def _getitem_bwd(c, g, o, a, index):
    out = np.zeros_like(a)
    if _is_basic(index):
        out[index] = g  # basic indexing never aliases an element twice
    else:
        np.add.at(out, index, g)
    return (out,)


register_op("getitem", lambda a, index: a[index], _getitem_bwd, arity=1)


def _split_along(g, sizes, axis):
    cuts = np.cumsum(sizes)[:-1]
    return np.split(g, cuts, axis=axis)


register_op(
    "stack",
    lambda *xs, axis=0: np.stack(xs, axis=axis),
    lambda c, g, o, *xs, axis=0: [np.take(g, i, axis=axis) for i in range(len(xs))],
)
register_op(
    "concat",
    lambda *xs, axis=0: np.concatenate(xs, axis=axis),
    lambda c, g, o, *xs, axis=0: _split_along(g, [x.shape[axis] for x in xs], axis),
)


# ---------------------------------------------------------------------------
# bilinear crop and resize


def bilinear_taps(box, in_size, out_size):
    """Source indices and weights for resampling ``box`` to ``out_size``.

    Pixel ``i`` of an image covers ``[i, i+1)``, so its center sits at
    ``i + 0.5``.  Output pixel centers map back into the box and sample the
    input bilinearly with edge clamping.
    """
    top, left, bottom, right = box
    taps = []
    for lo, hi, n_in, n_out in ((top, bottom, in_size[0], out_size[0]), (left, right, in_size[1], out_size[1])):
        pos = lo + (np.arange(n_out) + 0.5) * ((hi - lo) / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        i0 = np.floor(pos).astype(np.int64)
        i0 = np.minimum(i0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = pos - i0
        taps.append((i0, i1, frac))
    return taps


def _crop_fwd(img, box, out_size):
    h, w = img.shape[:2]
    top, left, bottom, right = box
    if min(bottom, h) <= max(top, 0) or min(right, w) <= max(left, 0):
        raise ValueError(f"box {tuple(box)} does not intersect a {h}x{w} image")
    (r0, r1, fr), (c0, c1, fc) = bilinear_taps(box, (h, w), out_size)
    fr = fr.reshape((-1, 1) + (1,) * (img.ndim - 2))
    fc = fc.reshape((1, -1) + (1,) * (img.ndim - 2))
    top_row = img[r0][:, c0] * (1.0 - fc) + img[r0][:, c1] * fc
    bot_row = img[r1][:, c0] * (1.0 - fc) + img[r1][:, c1] * fc
    return top_row * (1.0 - fr) + bot_row * fr


def _crop_bwd(c, g, o, img, box, out_size):
    (r0, r1, fr), (c0, c1, fc) = bilinear_taps(box, img.shape[:2], out_size)
    fr = fr.reshape((-1, 1) + (1,) * (img.ndim - 2))
    fc = fc.reshape((1, -1) + (1,) * (img.ndim - 2))
    out = np.zeros_like(img)
    R0, C0 = np.meshgrid(r0, c0, indexing="ij")
    R1, C1 = np.meshgrid(r1, c1, indexing="ij")
    np.add.at(out, (R0, C0), g * (1.0 - fr) * (1.0 - fc))
    np.add.at(out, (R0, C1), g * (1.0 - fr) * fc)
    np.add.at(out, (R1, C0), g * fr * (1.0 - fc))
    np.add.at(out, (R1, C1), g * fr * fc)
    return (out,)


register_op("crop_resize", _crop_fwd, _crop_bwd, arity=1)


# ---------------------------------------------------------------------------
# functional helpers


def _unary(kind):
    def fn(x):
        return record(kind, [x])

    fn.__name__ = kind
    return fn


exp = _unary("exp")
log = _unary("log")
sqrt = _unary("sqrt")
sin = _unary("sin")
cos = _unary("cos")
tanh = _unary("tanh")
sigmoid = _unary("sigmoid")
relu = _unary("relu")
absolute = _unary("abs")


def arctan2(y, x):
    return record("arctan2", [y, x])


def maximum(a, b):
    return record("maximum", [a, b])


def minimum(a, b):
    return record("minimum", [a, b])


def vmax(a, axis=None):
    return record("max", [a], axis=axis)


def vmin(a, axis=None):
    return record("min", [a], axis=axis)


def logsumexp(a, axis=None, temperature=1.0):
    return record("logsumexp", [a], axis=axis, temperature=float(temperature))


def smooth_max(a, axis=None, temperature=1.0):
    return logsumexp(a, axis=axis, temperature=temperature)


def smooth_min(a, axis=None, temperature=1.0):
    return -logsumexp(-as_value(a), axis=axis, temperature=temperature)


def stack(xs, axis=0):
    return record("stack", list(xs), axis=axis)


def concat(xs, axis=0):
    return record("concat", list(xs), axis=axis)


def crop_resize(image, box, out_size):
    """Bilinear resample of ``box`` = (top, left, bottom, right) to ``out_size``."""
    return record("crop_resize", [image], box=tuple(float(b) for b in box), out_size=tuple(int(s) for s in out_size))


def norm(x, axis=None):
    x = as_value(x)
    return sqrt((x * x).sum(axis=axis))
