"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything downstream (blocks, training loop, samplers) runs on this module.
Design points:

* All buffers are contiguous little-endian float64 numpy arrays.  Desk scale
  makes speed a non-issue and f64 keeps finite-difference checks clean.
* Autodiff is an explicit tape: eager execution appends one node per primitive
  in execution order, so iterating the node list in reverse is a reverse
  topological traversal.  ``backward`` walks that list and calls each node's
  vector-Jacobian product.
* Recording is thread-local.  One tape is single-threaded; independent tapes
  on independent threads never share state.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, ShapeError

# Diagnostic flags (inspect/reset from tests and `check` suites).
diagnostics = {"softmax_nan": False}


def reset_diagnostics():
    for key in diagnostics:
        diagnostics[key] = False


_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / finite differences)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One recorded primitive: inputs, a recompute closure, and a vjp."""

    __slots__ = ("op", "inputs", "output", "fwd", "vjp")

    def __init__(self, op, inputs, output, fwd, vjp):
        self.op = op
        self.inputs = inputs      # tuple of Tensors (constants are not recorded)
        self.output = output
        self.fwd = fwd            # () -> ndarray, recomputes from current input data
        self.vjp = vjp            # grad_out ndarray -> tuple of grads, one per input


class Tape:
    """Ordered record of primitives executed while the tape was active."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def replay_check(self):
        """Re-run every recorded forward and compare bit-for-bit.

        Returns the number of nodes whose recomputed output differs from the
        recorded one (0 means the tape is exactly reproducible).  Only
        meaningful while input data has not been mutated since recording.
        """
        mismatches = 0
        for node in self.nodes:
            again = node.fwd()
            if not np.array_equal(again, node.output.data):
                mismatches += 1
        return mismatches


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A shaped f64 buffer with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return list(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"

    # operator sugar -------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def parameter(data, name):
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _needs_tape(*tensors):
    if not _grad_enabled() or _active_tape() is None:
        return False
    return any(t.requires_grad for t in tensors)


def _record(op, inputs, out_data, fwd, vjp):
    # requires_grad marks "participates in differentiation"; recorded outputs
    # inherit it so chains of ops on intermediates keep recording.
    out = Tensor(out_data, requires_grad=True)
    _active_tape().nodes.append(Node(op, inputs, out, fwd, vjp))
    return out


def _accumulate(t, g):
    if g is None:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    g = np.asarray(g)
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data
    if not _needs_tape(a, b):
        return Tensor(out_data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", (a, b), out_data, lambda: a.data + b.data, vjp)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data
    if not _needs_tape(a, b):
        return Tensor(out_data)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("sub", (a, b), out_data, lambda: a.data - b.data, vjp)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data
    if not _needs_tape(a, b):
        return Tensor(out_data)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record("mul", (a, b), out_data, lambda: a.data * b.data, vjp)


def matmul(a, b):
    """Matrix product with numpy batching semantics on the leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or higher operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data
    if not _needs_tape(a, b):
        return Tensor(out_data)

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _record("matmul", (a, b), out_data, lambda: a.data @ b.data, vjp)


def softmax(x, axis=-1):
    """Numerically stabilized softmax along `axis`.

    NaN inputs propagate (the output row becomes NaN) and set the
    ``diagnostics["softmax_nan"]`` flag instead of raising.
    """
    x = _as_tensor(x)
    if np.isnan(x.data).any():
        diagnostics["softmax_nan"] = True

    def fwd():
        shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=axis, keepdims=True)

    out_data = fwd()
    if not _needs_tape(x):
        return Tensor(out_data)

    def vjp(g):
        y = out_data
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _record("softmax", (x,), out_data, fwd, vjp)


def normalize(x, eps=1e-6):
    """Zero-mean unit-variance over the last axis; zero-variance rows map to zeros."""
    x = _as_tensor(x)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = (x.data - mu) * inv

    if not _needs_tape(x):
        return Tensor(out_data)

    def fwd():
        m = np.mean(x.data, axis=-1, keepdims=True)
        v = np.var(x.data, axis=-1, keepdims=True)
        return (x.data - m) / np.sqrt(v + eps)

    def vjp(g):
        y = out_data
        gm = np.mean(g, axis=-1, keepdims=True)
        gym = np.mean(g * y, axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _record("normalize", (x,), out_data, fwd, vjp)


def layer_norm(x, scale, shift, eps=1e-6):
    """Per-row normalization followed by an affine map.

    The row statistics use the population variance with an eps guard, so a
    constant row normalizes to zeros rather than raising.
    """
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    return add(mul(normalize(x, eps=eps), scale), shift)


def silu(x):
    x = _as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out_data = x.data * s
    if not _needs_tape(x):
        return Tensor(out_data)

    def fwd():
        sf = 1.0 / (1.0 + np.exp(-x.data))
        return x.data * sf

    def vjp(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _record("silu", (x,), out_data, fwd, vjp)


def tsum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out_data = np.sum(x.data, axis=axis, keepdims=keepdims)
    if not _needs_tape(x):
        return Tensor(out_data)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _record("sum", (x,), out_data,
                   lambda: np.sum(x.data, axis=axis, keepdims=keepdims), vjp)


def tmean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.data.shape[i] for i in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    x = _as_tensor(x)
    out_data = x.data.reshape(shape)
    if not _needs_tape(x):
        return Tensor(out_data)

    def vjp(g):
        return (np.asarray(g).reshape(x.data.shape),)

    return _record("reshape", (x,), out_data, lambda: x.data.reshape(shape), vjp)


def transpose(x, axes):
    x = _as_tensor(x)
    axes = tuple(axes)
    out_data = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))
    if not _needs_tape(x):
        return Tensor(out_data)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _record("transpose", (x,), out_data, lambda: np.transpose(x.data, axes), vjp)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _needs_tape(*tensors):
        return Tensor(out_data)

    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _record("concat", tuple(tensors), out_data,
                   lambda: np.concatenate([t.data for t in tensors], axis=axis), vjp)


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    x = _as_tensor(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = x.data[sl]
    if not _needs_tape(x):
        return Tensor(out_data)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return _record("narrow", (x,), out_data, lambda: x.data[sl], vjp)


def embedding(table, ids):
    """Row gather from an embedding table; ids is a constant integer array."""
    if not isinstance(table, Tensor):
        raise ContractError("embedding table must be a Tensor")
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]
    if not _needs_tape(table):
        return Tensor(out_data)

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), np.asarray(g).reshape(-1, table.data.shape[-1]))
        return (gt,)

    return _record("embedding", (table,), out_data, lambda: table.data[ids], vjp)


def rotate_pairs(x, cos, sin):
    """Rotate channel pairs (2i, 2i+1) of the last axis by precomputed angles.

    cos/sin must broadcast against x[..., ::2].  Norm of every pair is
    preserved; the adjoint is the rotation by the negated angles.
    """
    x = _as_tensor(x)
    if x.data.shape[-1] % 2 != 0:
        raise ShapeError(f"rotate_pairs needs an even last axis, got {x.shape}")
    cos = np.asarray(cos, dtype=np.float64)
    sin = np.asarray(sin, dtype=np.float64)

    def _rot(arr, c, s):
        even = arr[..., 0::2]
        odd = arr[..., 1::2]
        out = np.empty_like(arr)
        out[..., 0::2] = even * c - odd * s
        out[..., 1::2] = even * s + odd * c
        return out

    out_data = _rot(x.data, cos, sin)
    if not _needs_tape(x):
        return Tensor(out_data)

    def vjp(g):
        return (_rot(np.asarray(g), cos, -sin),)

    return _record("rotate_pairs", (x,), out_data, lambda: _rot(x.data, cos, sin), vjp)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss, params=None):
    """Populate gradients of everything reachable from a scalar loss.

    Walks the active tape's node list in reverse execution order (a reverse
    topological order, since execution is eager).  Parameters passed via
    `params` that the loss never touched get an explicit zero gradient.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _active_tape()
    if tape is None:
        raise ContractError("backward called with no active tape")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.vjp(g)
        for parent, pg in zip(node.inputs, grads):
            _accumulate(parent, pg)

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
