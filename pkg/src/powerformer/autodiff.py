"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them. Calling
:func:`backward` on a scalar walks that graph in reverse topological order.
The graph is rebuilt on every forward pass; nothing is cached between passes.

Ops broadcast like numpy over leading (batch) dimensions, so one graph can
carry a whole mini-batch.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np
import scipy.sparse as sp

from .errors import CheckpointError, MissingGrad, NonScalarLoss, ShapeMismatch

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise NonScalarLoss(f"tensor of shape {self.shape} is not a scalar")

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def __getitem__(self, idx):
        return index(self, idx)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)


def _acc(t, g):
    # gradients are never updated in place, so arrays may be shared between tensors
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=DTYPE)
    if g.shape != t.shape:
        g = np.broadcast_to(g, t.shape)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -----------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def neg(a):
    return scale(a, -1.0)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        _acc(a, g * c)

    return _result(a.data * c, (a,), bw)


def mul(a, b):
    """Hadamard product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def broadcast_hadamard(x, w):
    """Scale each node row of ``x (..., n, d)`` by ``w (..., n, 1)``.

    Node-major counterpart of multiplying a ``d x n`` matrix by an ``n x 1``
    column with broadcasting.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim < 2 or w.shape[-2:] != (x.shape[-2], 1):
        raise ShapeMismatch(f"broadcast_hadamard: {x.shape} vs {w.shape}; need (..., n, d) and (..., n, 1)")
    return mul(x, w)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        _acc(a, g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), bw)


# -- linear algebra ----------------------------------------------------------------


def _fold(x, lead):
    """View ``x (*lead, *mid, r, c)`` as ``(*mid, prod(lead) * r, c)``."""
    if not lead:
        return x
    p = int(np.prod(x.shape[:lead]))
    mid = x.shape[lead:-2]
    x = x.reshape((p,) + x.shape[lead:])
    if mid:
        x = np.moveaxis(x, 0, -3)
    return x.reshape(mid + (p * x.shape[-2], x.shape[-1]))


def _unfold(y, lead_shape, rows):
    """Inverse of :func:`_fold` for an output with ``rows`` rows per item."""
    if not lead_shape:
        return y
    p = int(np.prod(lead_shape))
    mid = y.shape[:-2]
    y = y.reshape(mid + (p, rows, y.shape[-1]))
    if mid:
        y = np.moveaxis(y, -3, 0)
    return y.reshape(tuple(lead_shape) + mid + (rows, y.shape[-1]))


def matmul(a, b):
    """Batched matrix product; a lower-rank ``b`` is shared across ``a``'s leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    lead = a.ndim - b.ndim
    if lead > 0 and a.shape[lead:-2] == b.shape[:-2]:
        # shared weight: one large product per weight slice instead of many small ones
        rows = a.shape[-2]
        xa = _fold(a.data, lead)
        out = _unfold(np.matmul(xa, b.data), a.shape[:lead], rows)

        def bw(g):
            gf = _fold(g, lead)
            if a.requires_grad:
                _acc(a, _unfold(np.matmul(gf, np.swapaxes(b.data, -1, -2)), a.shape[:lead], rows))
            if b.requires_grad:
                _acc(b, np.matmul(np.swapaxes(xa, -1, -2), gf))

        return _result(out, (a, b), bw)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are not aligned") from None

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(out, (a, b), bw)


def transpose(a):
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeMismatch(f"transpose needs at least 2 dims, got {a.shape}")

    def bw(g):
        _acc(a, np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(a.data, -1, -2), (a,), bw)


class SparseOperator:
    """A constant sparse ``(n, n)`` matrix applied along the node axis.

    For inputs with leading dims the product is taken with a cached
    block-diagonal copy, so ``(..., n, d)`` data never has to be transposed.
    """

    def __init__(self, matrix):
        self.matrix = sp.csr_matrix(matrix)
        self.n = self.matrix.shape[0]
        self._blocks = {}

    @property
    def shape(self):
        return self.matrix.shape

    def block(self, count):
        hit = self._blocks.get(count)
        if hit is None:
            if len(self._blocks) > 8:
                self._blocks.clear()
            big = sp.kron(sp.identity(count, format="csr"), self.matrix, format="csr")
            hit = self._blocks[count] = (big, big.T.tocsr())
        return hit


def spmm(op, x):
    """Sparse node operator times ``x (..., n, d)``."""
    if not isinstance(op, SparseOperator):
        op = SparseOperator(op)
    x = as_tensor(x)
    n = op.n
    if x.ndim < 2 or x.shape[-2] != n:
        raise ShapeMismatch(f"spmm: sparse {op.shape} cannot multiply {x.shape}")
    count = int(np.prod(x.shape[:-2]))
    big, big_t = op.block(count)
    d = x.shape[-1]

    def bw(g):
        _acc(x, (big_t @ g.reshape(-1, d)).reshape(x.shape))

    return _result((big @ x.data.reshape(-1, d)).reshape(x.shape), (x,), bw)


def grouped_matmul(x, w):
    """Per-group product: ``x (k, ..., r, c)`` with ``w (k, c, e)``, group ``t`` uses ``w[t]``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 3 or x.ndim < 2 or x.shape[0] != w.shape[0] or x.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"grouped_matmul: {x.shape} vs weights {w.shape}")
    k, c, e = w.shape
    xf = x.data.reshape(k, -1, c)
    out_shape = x.shape[:-1] + (e,)

    def bw(g):
        gf = g.reshape(k, -1, e)
        if x.requires_grad:
            _acc(x, np.matmul(gf, np.swapaxes(w.data, -1, -2)).reshape(x.shape))
        if w.requires_grad:
            _acc(w, np.matmul(np.swapaxes(xf, -1, -2), gf))

    return _result(np.matmul(xf, w.data).reshape(out_shape), (x, w), bw)


# -- reductions / shaping ---------------------------------------------------------


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape))

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def mean_pool(x):
    """Average over the node axis of ``(..., n, d)``, giving ``(..., d)``."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ShapeMismatch(f"mean_pool needs (..., n>=1, d), got {x.shape}")
    return mean(x, axis=-2)


def moveaxis(a, source, destination):
    a = as_tensor(a)

    def bw(g):
        _acc(a, np.moveaxis(g, destination, source))

    return _result(np.moveaxis(a.data, source, destination), (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}") from None

    def bw(g):
        _acc(a, g.reshape(a.shape))

    return _result(out, (a,), bw)


def index(a, idx):
    """Basic (slice / integer) indexing."""
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[idx] = g
        _acc(a, full)

    return _result(out, (a,), bw)


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            _acc(t, piece)

    return _result(out, tuple(ts), bw)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _acc(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _result(s, (a,), bw)


def mse(pred, target):
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        _acc(pred, g * 2.0 * diff / n)
        _acc(target, -g * 2.0 * diff / n)

    return _result(np.array(np.mean(diff * diff)), (pred, target), bw)


def backward(loss, params=()):
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    Tensors listed in ``params`` that ``loss`` does not depend on get zero
    gradients.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones(loss.shape, dtype=DTYPE)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros(p.shape, dtype=DTYPE)


# -- parameters and optimizer ------------------------------------------------------


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ParameterStore:
    """Ordered name -> trainable tensor map plus Adam state."""

    def __init__(self):
        self.params = OrderedDict()
        self.step = 0
        self._m = {}
        self._v = {}

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def affine(self, rng, name, fan_in, fan_out):
        """Register ``name.w`` (Glorot uniform) and ``name.b`` (zeros)."""
        return self.add(f"{name}.w", glorot(rng, fan_in, fan_out)), self.add(f"{name}.b", np.zeros(fan_out))

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state):
        for k, v in state.items():
            if k not in self.params:
                raise ShapeMismatch(f"unknown parameter {k!r} in checkpoint")
            if self.params[k].shape != np.shape(v):
                raise ShapeMismatch(f"parameter {k!r}: checkpoint shape {np.shape(v)} vs model {self.params[k].shape}")
        missing = set(self.params) - set(state)
        if missing:
            raise ShapeMismatch(f"checkpoint lacks parameters {sorted(missing)}")
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=DTYPE, copy=True)

    def copy_from(self, other):
        for k, p in self.params.items():
            p.data = other.params[k].data.copy()

    def num_parameters(self):
        return int(np.sum([p.data.size for p in self.params.values()]))


def adam_step(store, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, max_grad_norm=None):
    """One Adam update over ``store`` in name order, then clear the gradients."""
    for name, p in store.params.items():
        if p.grad is None:
            raise MissingGrad(f"parameter {name!r} has no gradient")
    if max_grad_norm is not None:
        total = np.sqrt(np.sum([np.sum(p.grad * p.grad) for p in store.params.values()]))
        if total > max_grad_norm:
            for p in store.params.values():
                p.grad = p.grad * (max_grad_norm / total)
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in store.params.items():
        g = p.grad
        m = store._m.get(name)
        if m is None:
            m = store._m[name] = np.zeros_like(p.data)
            store._v[name] = np.zeros_like(p.data)
        v = store._v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None


# -- checkpoint archive ---------------------------------------------------------------

_MAGIC = b"PFCKPT\x00\x01"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, store, meta=""):
    """Write ``(name, shape, little-endian float64 data)`` records after a header."""
    meta_b = meta.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_b)))
        fh.write(meta_b)
        fh.write(struct.pack("<I", len(store.params)))
        for name, p in store.params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Return ``(OrderedDict name -> array, meta string)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = buf[pos:pos + meta_len].decode("utf-8")
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            out[name] = arr.astype(DTYPE)
    except (struct.error, ValueError) as err:
        raise CheckpointError(f"{path}: truncated checkpoint ({err})") from None
    return out, meta


def load_checkpoint(path, store):
    state, meta = read_checkpoint(path)
    store.load_state_dict(state)
    return meta
