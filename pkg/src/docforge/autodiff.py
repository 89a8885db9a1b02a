"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations are recorded eagerly on a :class:`Tape` (define-by-run).  The
recorded tape can be replayed with new input bindings (:func:`forward`) and
differentiated (:func:`gradient`), which is what the finite-difference
checker relies on.

Every primitive is a pure function of its input values and static attributes,
so value-dependent choices (argmax, max-subtraction, case selection) are
recomputed on replay.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    def __init__(self, node_id, op):
        super().__init__(f"non-finite value produced by node {node_id} ({op})")
        self.node_id = node_id


class ShapeError(ValueError):
    def __init__(self, node_id, expected, got):
        super().__init__(f"node {node_id}: expected shape {expected}, got {got}")
        self.node_id = node_id


# name -> (forward(values, attrs), backward(g, out, values, attrs, needs))
PRIMITIVES: dict = {}


def primitive(name):
    def register(cls):
        PRIMITIVES[name] = (cls.forward, cls.backward)
        return cls

    return register


class Tensor:
    __slots__ = ("tape", "id", "op", "parents", "attrs", "value", "kind", "requires_grad", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape, op, parents, attrs, value, kind, requires_grad, name=None):
        self.tape = tape
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.value = value
        self.kind = kind
        self.requires_grad = requires_grad
        self.name = name
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor(id={self.id}, {label}, shape={self.shape})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Tape:
    """Ordered record of tensors; nodes are appended in topological order."""

    def __init__(self, dtype=np.float32, check_finite=True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.nodes: list[Tensor] = []

    def _leaf(self, value, kind, requires_grad, name):
        value = np.array(value, dtype=self.dtype)
        return Tensor(self, kind, (), None, value, kind, requires_grad, name)

    def input(self, value, name=None):
        """A bindable leaf: replays take its value from ``bindings``."""
        return self._leaf(value, "input", True, name)

    def param(self, value, name=None):
        return self._leaf(value, "param", True, name)

    def const(self, value, name=None):
        return self._leaf(value, "const", False, name)

    def release(self):
        """Drop recorded nodes.  Tensors point back at their tape, so a finished
        tape is otherwise only reclaimed by the cyclic collector, which does not
        see how large the activation buffers are."""
        self.nodes.clear()

    @property
    def inputs(self):
        return [n for n in self.nodes if n.kind == "input"]

    @property
    def params(self):
        return [n for n in self.nodes if n.kind == "param"]

    def record(self, op, parents, attrs=None):
        fwd, _ = PRIMITIVES[op]
        with np.errstate(all="ignore"):
            out = fwd([p.value for p in parents], attrs)
        if out.dtype != self.dtype:
            out = out.astype(self.dtype)
        node = Tensor(self, op, tuple(parents), attrs, out, "op", any(p.requires_grad for p in parents))
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(node.id, op)
        return node


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one operand must be a Tensor")


def _lift(tape, x):
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError(f"{x!r} belongs to a different tape")
        return x
    return tape.const(x)


def _op(op, *xs, **attrs):
    tape = _tape_of(*xs)
    return tape.record(op, [_lift(tape, x) for x in xs], attrs)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


@primitive("add")
class _Add:
    @staticmethod
    def forward(v, a):
        return v[0] + v[1]

    @staticmethod
    def backward(g, out, v, a, needs):
        return (_unbroadcast(g, v[0].shape) if needs[0] else None,
                _unbroadcast(g, v[1].shape) if needs[1] else None)


@primitive("sub")
class _Sub:
    @staticmethod
    def forward(v, a):
        return v[0] - v[1]

    @staticmethod
    def backward(g, out, v, a, needs):
        return (_unbroadcast(g, v[0].shape) if needs[0] else None,
                _unbroadcast(-g, v[1].shape) if needs[1] else None)


@primitive("mul")
class _Mul:
    @staticmethod
    def forward(v, a):
        return v[0] * v[1]

    @staticmethod
    def backward(g, out, v, a, needs):
        return (_unbroadcast(g * v[1], v[0].shape) if needs[0] else None,
                _unbroadcast(g * v[0], v[1].shape) if needs[1] else None)


@primitive("div")
class _Div:
    @staticmethod
    def forward(v, a):
        return v[0] / v[1]

    @staticmethod
    def backward(g, out, v, a, needs):
        return (_unbroadcast(g / v[1], v[0].shape) if needs[0] else None,
                _unbroadcast(-g * out / v[1], v[1].shape) if needs[1] else None)


@primitive("neg")
class _Neg:
    @staticmethod
    def forward(v, a):
        return -v[0]

    @staticmethod
    def backward(g, out, v, a, needs):
        return (-g,)


@primitive("scale")
class _Scale:
    @staticmethod
    def forward(v, a):
        return v[0] * a["c"]

    @staticmethod
    def backward(g, out, v, a, needs):
        return (g * a["c"],)


@primitive("exp")
class _Exp:
    @staticmethod
    def forward(v, a):
        return np.exp(v[0])

    @staticmethod
    def backward(g, out, v, a, needs):
        return (g * out,)


@primitive("log")
class _Log:
    @staticmethod
    def forward(v, a):
        return np.log(v[0])

    @staticmethod
    def backward(g, out, v, a, needs):
        return (g / v[0],)


@primitive("sqrt")
class _Sqrt:
    @staticmethod
    def forward(v, a):
        return np.sqrt(v[0])

    @staticmethod
    def backward(g, out, v, a, needs):
        return (g * 0.5 / out,)


@primitive("tanh")
class _Tanh:
    @staticmethod
    def forward(v, a):
        return np.tanh(v[0])

    @staticmethod
    def backward(g, out, v, a, needs):
        return (g * (1 - out * out),)


@primitive("relu")
class _Relu:
    @staticmethod
    def forward(v, a):
        return np.maximum(v[0], 0)

    @staticmethod
    def backward(g, out, v, a, needs):
        return (g * (v[0] > 0),)


@primitive("maximum_const")
class _MaximumConst:
    # ties pass the gradient to x
    @staticmethod
    def forward(v, a):
        return np.maximum(v[0], a["c"])

    @staticmethod
    def backward(g, out, v, a, needs):
        return (g * (v[0] >= a["c"]),)


def add(a, b):
    return _op("add", a, b)


def sub(a, b):
    return _op("sub", a, b)


def mul(a, b):
    return _op("mul", a, b)


def div(a, b):
    return _op("div", a, b)


def neg(x):
    return _op("neg", x)


def scale(x, c):
    return _op("scale", x, c=float(c))


def exp(x):
    return _op("exp", x)


def log(x):
    return _op("log", x)


def sqrt(x):
    return _op("sqrt", x)


def tanh(x):
    return _op("tanh", x)


def relu(x):
    return _op("relu", x)


def maximum(x, c):
    """Elementwise max against a scalar constant."""
    return _op("maximum_const", x, c=float(c))


# ------------------------------------------------------------------- linear


def _mm(a, b):
    # numpy only reaches BLAS for contiguous stacks; strided views take a slow loop
    if a.ndim > 2 or b.ndim > 2:
        a, b = np.ascontiguousarray(a), np.ascontiguousarray(b)
    return np.matmul(a, b)


def _flushed(x):
    """Copy of ``x`` with subnormal entries zeroed (see ``_flush_subnormal``)."""
    if x.dtype.kind != "f":
        return x
    small = np.abs(x) < np.finfo(x.dtype).tiny
    return np.where(small, 0, x).astype(x.dtype, copy=False) if small.any() else x


@primitive("matmul")
class _Matmul:
    @staticmethod
    def forward(v, a):
        x, w = v
        if w.ndim == 2 and x.ndim > 2:
            # fold batch dims into one BLAS call
            flat = np.ascontiguousarray(x).reshape(-1, x.shape[-1]) @ w
            return flat.reshape(x.shape[:-1] + (w.shape[-1],))
        return _mm(x, w)

    @staticmethod
    def backward(g, out, v, a, needs):
        x, w = v
        g = _flushed(g)
        gx = gw = None
        if needs[0]:
            gx = _mm(g, np.swapaxes(w, -1, -2)) if w.ndim > 1 else np.multiply.outer(g, w)
            gx = _unbroadcast(gx, x.shape)
        if needs[1]:
            if x.ndim == 1:
                gw = np.multiply.outer(x, g)
            elif w.ndim == 2 and x.ndim > 2:
                # fold batch dims: (..., n, k)^T @ (..., n, m)
                xf = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
                gw = xf.T @ np.ascontiguousarray(g).reshape(-1, g.shape[-1])
            else:
                gw = _unbroadcast(_mm(np.swapaxes(x, -1, -2), g), w.shape)
        return gx, gw


def matmul(a, b):
    return _op("matmul", a, b)


# ---------------------------------------------------------------- reductions


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(v, a):
        return np.asarray(np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"]))

    @staticmethod
    def backward(g, out, v, a, needs):
        if not a["keepdims"] and a["axis"] is not None:
            g = np.expand_dims(g, a["axis"])
        return (np.broadcast_to(g, v[0].shape).copy(),)


@primitive("mean")
class _Mean:
    @staticmethod
    def forward(v, a):
        return np.asarray(np.mean(v[0], axis=a["axis"], keepdims=a["keepdims"]))

    @staticmethod
    def backward(g, out, v, a, needs):
        n = v[0].size // max(out.size, 1)
        if not a["keepdims"] and a["axis"] is not None:
            g = np.expand_dims(g, a["axis"])
        return (np.broadcast_to(g / n, v[0].shape).copy(),)


@primitive("max")
class _Max:
    # gradient routed to the lowest-index maximiser
    @staticmethod
    def forward(v, a):
        return np.max(v[0], axis=a["axis"])

    @staticmethod
    def backward(g, out, v, a, needs):
        ax = a["axis"]
        idx = np.expand_dims(np.argmax(v[0], axis=ax), ax)
        gx = np.zeros_like(v[0])
        np.put_along_axis(gx, idx, np.expand_dims(g, ax), axis=ax)
        return (gx,)


def _axis(axis):
    return tuple(axis) if isinstance(axis, list) else axis


def sum_(x, axis=None, keepdims=False):
    return _op("sum", x, axis=_axis(axis), keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return _op("mean", x, axis=_axis(axis), keepdims=keepdims)


def max_(x, axis=-1):
    return _op("max", x, axis=axis)


# -------------------------------------------------------------------- shape


@primitive("reshape")
class _Reshape:
    @staticmethod
    def forward(v, a):
        return v[0].reshape(a["shape"])

    @staticmethod
    def backward(g, out, v, a, needs):
        return (g.reshape(v[0].shape),)


@primitive("transpose")
class _Transpose:
    @staticmethod
    def forward(v, a):
        return np.transpose(v[0], a["axes"])

    @staticmethod
    def backward(g, out, v, a, needs):
        axes = a["axes"]
        inv = None if axes is None else tuple(np.argsort(axes))
        return (np.transpose(g, inv),)


@primitive("getitem")
class _Getitem:
    @staticmethod
    def forward(v, a):
        return np.array(v[0][a["index"]])

    @staticmethod
    def backward(g, out, v, a, needs):
        gx = np.zeros_like(v[0])
        idx = a["index"]
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in parts)
        if basic:
            gx[idx] += g  # basic indexing never repeats an element
        else:
            np.add.at(gx, idx, g)
        return (gx,)


@primitive("concat")
class _Concat:
    @staticmethod
    def forward(v, a):
        return np.concatenate(v, axis=a["axis"])

    @staticmethod
    def backward(g, out, v, a, needs):
        cuts = np.cumsum([x.shape[a["axis"]] for x in v])[:-1]
        parts = np.split(g, cuts, axis=a["axis"])
        return tuple(p if n else None for p, n in zip(parts, needs))


@primitive("pad")
class _Pad:
    @staticmethod
    def forward(v, a):
        return np.pad(v[0], a["widths"], constant_values=a["value"])

    @staticmethod
    def backward(g, out, v, a, needs):
        sl = tuple(slice(lo, g.shape[i] - hi) for i, (lo, hi) in enumerate(a["widths"]))
        return (g[sl],)


def reshape(x, shape):
    return _op("reshape", x, shape=tuple(shape))


def transpose(x, axes=None):
    return _op("transpose", x, axes=None if axes is None else tuple(axes))


def getitem(x, index):
    return _op("getitem", x, index=index)


def concat(xs, axis=0):
    tape = _tape_of(*xs)
    return tape.record("concat", [_lift(tape, x) for x in xs], {"axis": axis})


def pad(x, widths, value=0.0):
    """Constant padding; ``widths`` as for ``np.pad``."""
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)
    return _op("pad", x, widths=widths, value=float(value))


# -------------------------------------------------------------- activations


def _flush_subnormal(x):
    # sharp softmaxes leave many entries at or near the subnormal range, and
    # BLAS runs ~100x slower on subnormals; zero entries below tiny/eps, whose
    # products with unit-scale numbers would be subnormal anyway
    if x.dtype.kind == "f":
        fi = np.finfo(x.dtype)
        x[np.abs(x) < fi.tiny / fi.eps] = 0
    return x


@primitive("softmax")
class _Softmax:
    @staticmethod
    def forward(v, a):
        z = v[0] - np.max(v[0], axis=a["axis"], keepdims=True)
        e = np.exp(z)
        return _flush_subnormal(e / np.sum(e, axis=a["axis"], keepdims=True))

    @staticmethod
    def backward(g, out, v, a, needs):
        s = np.sum(g * out, axis=a["axis"], keepdims=True)
        return (_flush_subnormal(out * (g - s)),)


@primitive("log_softmax")
class _LogSoftmax:
    @staticmethod
    def forward(v, a):
        z = v[0] - np.max(v[0], axis=a["axis"], keepdims=True)
        return z - np.log(np.sum(np.exp(z), axis=a["axis"], keepdims=True))

    @staticmethod
    def backward(g, out, v, a, needs):
        return (_flush_subnormal(g - np.exp(out) * np.sum(g, axis=a["axis"], keepdims=True)),)


@primitive("layer_norm")
class _LayerNorm:
    @staticmethod
    def forward(v, a):
        x = v[0]
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + a["eps"])

    @staticmethod
    def backward(g, out, v, a, needs):
        x = v[0]
        var = ((x - x.mean(axis=-1, keepdims=True)) ** 2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + a["eps"])
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)


def softmax(x, axis=-1):
    return _op("softmax", x, axis=axis)


def log_softmax(x, axis=-1):
    return _op("log_softmax", x, axis=axis)


def layer_norm(x, eps=1e-5):
    """Normalize over the last axis (no affine part)."""
    return _op("layer_norm", x, eps=float(eps))


# ------------------------------------------------------------ indexing/masks


@primitive("gather")
class _Gather:
    @staticmethod
    def forward(v, a):
        idx = np.expand_dims(a["index"], -1)
        return np.take_along_axis(v[0], idx, axis=-1)[..., 0]

    @staticmethod
    def backward(g, out, v, a, needs):
        gx = np.zeros_like(v[0])
        np.put_along_axis(gx, np.expand_dims(a["index"], -1), np.expand_dims(g, -1), axis=-1)
        return (gx,)


def gather(x, index):
    """``x[..., index[...]]`` along the last axis."""
    return _op("gather", x, index=np.asarray(index, dtype=np.int64))


@primitive("masked_assign")
class _MaskedAssign:
    @staticmethod
    def forward(v, a):
        return np.where(a["mask"], a["values"], v[0])

    @staticmethod
    def backward(g, out, v, a, needs):
        return (np.where(a["mask"], 0.0, g).astype(g.dtype),)


def masked_assign(x, mask, values):
    """Replace ``x`` with constant ``values`` where ``mask``; gradient there is exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    values = np.broadcast_to(np.asarray(values, dtype=x.tape.dtype), x.shape)
    return _op("masked_assign", x, mask=mask, values=values)


@primitive("logit_margin")
class _LogitMargin:
    # per position: top - z[y] where argmax != y, else 0
    @staticmethod
    def forward(v, a):
        z, y = v[0], a["target"]
        top_idx = np.argmax(z, axis=-1)
        top = np.take_along_axis(z, top_idx[..., None], axis=-1)[..., 0]
        tgt = np.take_along_axis(z, y[..., None], axis=-1)[..., 0]
        return np.where(top_idx != y, top - tgt, 0.0)

    @staticmethod
    def backward(g, out, v, a, needs):
        z, y = v[0], a["target"]
        top_idx = np.argmax(z, axis=-1)
        live = (top_idx != y).astype(z.dtype) * g
        gz = np.zeros_like(z)
        np.put_along_axis(gz, top_idx[..., None], live[..., None], axis=-1)
        gz[tuple(np.indices(y.shape)) + (y,)] -= live
        return (gz,)


def logit_margin(z, target):
    return _op("logit_margin", z, target=np.asarray(target, dtype=np.int64))


# ------------------------------------------------------------------- resize


def _interp_matrix(n_out, n_in):
    """Half-pixel-centre bilinear weights, edge-clamped: (n_out, n_in)."""
    R = np.zeros((n_out, n_in))
    s = n_in / n_out
    src = (np.arange(n_out) + 0.5) * s - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    rows = np.arange(n_out)
    np.add.at(R, (rows, i0), 1 - w)
    np.add.at(R, (rows, i1), w)
    return R


_INTERP_CACHE: dict = {}


def interp_matrix(n_out, n_in, dtype=np.float64):
    key = (n_out, n_in, np.dtype(dtype).str)
    if key not in _INTERP_CACHE:
        _INTERP_CACHE[key] = _interp_matrix(n_out, n_in).astype(dtype)
    return _INTERP_CACHE[key]


@primitive("resize_bilinear")
class _ResizeBilinear:
    # x: (..., H, W) -> (..., h, w), separable: Ry @ x @ Rx^T
    @staticmethod
    def forward(v, a):
        x = v[0]
        Ry = interp_matrix(a["size"][0], x.shape[-2], x.dtype)
        Rx = interp_matrix(a["size"][1], x.shape[-1], x.dtype)
        return _mm(_mm(Ry, x), Rx.T)

    @staticmethod
    def backward(g, out, v, a, needs):
        x = v[0]
        Ry = interp_matrix(a["size"][0], x.shape[-2], x.dtype)
        Rx = interp_matrix(a["size"][1], x.shape[-1], x.dtype)
        return (_mm(_mm(Ry.T, g), Rx),)


def resize_bilinear(x, size):
    """Bilinear resize of the last two axes to ``size`` = (h, w)."""
    return _op("resize_bilinear", x, size=(int(size[0]), int(size[1])))


# ------------------------------------------------------- replay / gradients


def forward(tape: Tape, bindings) -> dict:
    """Replay ``tape`` with input values from ``bindings`` (node or id -> array).

    Returns a map node id -> value.  Parameters and constants keep their
    recorded values unless also bound.
    """
    bound = {(k.id if isinstance(k, Tensor) else int(k)): v for k, v in bindings.items()}
    values = {}
    for node in tape.nodes:
        if node.kind == "op":
            fwd, _ = PRIMITIVES[node.op]
            with np.errstate(all="ignore"):
                out = fwd([values[p.id] for p in node.parents], node.attrs)
            if out.dtype != tape.dtype:
                out = out.astype(tape.dtype)
            if not np.all(np.isfinite(out)):
                raise NonFiniteError(node.id, node.op)
            values[node.id] = out
            continue
        if node.id in bound:
            val = np.asarray(bound[node.id], dtype=tape.dtype)
            if val.shape != node.value.shape:
                raise ShapeError(node.id, node.value.shape, val.shape)
            values[node.id] = val
        elif node.kind == "input":
            raise KeyError(f"input node {node.id} is not bound")
        else:
            values[node.id] = node.value
    return values


def gradient(tape: Tape, output: Tensor, wrt, values=None) -> dict:
    """d output / d node for each node in ``wrt``; keyed by node id.

    ``values`` is a replay map from :func:`forward`; defaults to recorded values.
    """
    if output.tape is not tape:
        raise ValueError("output is not on this tape")
    wrt = list(wrt)
    for w in wrt:
        if w.tape is not tape or w.id >= len(tape.nodes) or tape.nodes[w.id] is not w:
            raise ValueError(f"{w!r} is not on this tape")
    if values is None:
        out_val = output.value
        val = lambda n: n.value  # noqa: E731
    else:
        out_val = values[output.id]
        val = lambda n: values[n.id]  # noqa: E731
    if out_val.size != 1:
        raise ValueError(f"output must be scalar, got shape {out_val.shape}")

    grads = {output.id: np.ones_like(out_val)}
    for node in reversed(tape.nodes[: output.id + 1]):
        g = grads.get(node.id)
        if g is None or node.kind != "op":
            continue
        needs = tuple(p.requires_grad for p in node.parents)
        if not any(needs):
            continue
        _, bwd = PRIMITIVES[node.op]
        pg = bwd(g, val(node), [val(p) for p in node.parents], node.attrs, needs)
        for p, gp, need in zip(node.parents, pg, needs):
            if not need or gp is None:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + gp
            else:
                grads[p.id] = gp
    return {w.id: grads.get(w.id, np.zeros_like(val(w))) for w in wrt}


def grad(output: Tensor, wrt):
    """Convenience: gradients on ``output.tape`` as a list aligned with ``wrt``."""
    res = gradient(output.tape, output, wrt)
    return [res[w.id] for w in wrt]


def check_gradient(tape: Tape, output: Tensor, wrt, h=1e-5, max_components=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    Error per component is ``|analytic - numeric| / max(1, |analytic|)``.
    ``max_components`` subsamples coordinates per node for large inputs.
    """
    wrt = list(wrt)
    base = {n.id: n.value.copy() for n in tape.nodes if n.kind in ("input", "param")}
    analytic = gradient(tape, output, wrt, forward(tape, base))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for w in wrt:
        flat_idx = np.arange(w.value.size)
        if max_components is not None and flat_idx.size > max_components:
            flat_idx = rng.choice(flat_idx, size=max_components, replace=False)
        a = analytic[w.id].reshape(-1)
        for k in flat_idx:
            vals = dict(base)
            x = base[w.id].copy().reshape(-1)
            x[k] += h
            vals[w.id] = x.reshape(w.value.shape)
            up = forward(tape, vals)[output.id].item()
            x[k] -= 2 * h
            vals[w.id] = x.reshape(w.value.shape)
            down = forward(tape, vals)[output.id].item()
            num = (up - down) / (2 * h)
            err = abs(a[k] - num) / max(1.0, abs(a[k]))
            worst = max(worst, err)
    return worst
