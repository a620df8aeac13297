"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every array in the package flows through the ops defined here. An op computes its
result eagerly with numpy and, when a tape is active and any input requires a
gradient, records a node whose adjoint closure is replayed by ``Tape.backward``.
With no active tape the same functions run as plain vectorized numpy, which is the
mode the finite-difference oracle and all evaluation paths use.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy.special import erf as _erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class PreconditionError(RuntimeError):
    pass


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape():
    # hot path: one attribute lookup, no helper call (this runs once per op)
    stack = getattr(_local, "stack", None)
    if stack:
        return stack[-1]
    return None


class Tensor:
    """Immutable-by-convention float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic routes through the module-level primitives
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


def _raw(t) -> Tensor:
    """Wrap plain arrays/scalars as constant tensors without the finite check."""
    if isinstance(t, Tensor):
        return t
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(t, dtype=np.float64)
    out.requires_grad = False
    out.grad = None
    return out


def _result(data: np.ndarray, requires_grad: bool) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires_grad
    out.grad = None
    return out


class _Node:
    __slots__ = ("out", "inputs", "adjoint")

    def __init__(self, out, inputs, adjoint):
        self.out = out
        self.inputs = inputs
        self.adjoint = adjoint


class Tape:
    """Ordered record of primitive ops; append order is a topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape context exited out of order")
        stack.pop()
        return False

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Seed d(loss)=1 and sweep the tape once in reverse.

        Returns a map from id(tensor) to accumulated gradient for every tensor
        with requires_grad that participated. Leaf tensors also get .grad set.
        """
        if loss.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            # popping on consumption means whatever survives the sweep is a leaf
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            for t, g in zip(node.inputs, node.adjoint(g_out)):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        return grads


def _record(out: Tensor, inputs: tuple, adjoint) -> Tensor:
    # requires_grad is only ever True under an active tape, so check it first
    # and skip the thread-local lookup on the (hot) gradient-free path
    if out.requires_grad:
        tape = active_tape()
        if tape is not None:
            tape.nodes.append(_Node(out, inputs, adjoint))
    return out


def _wants_grad(*ts: Tensor) -> bool:
    if active_tape() is None:
        return False
    return any(t.requires_grad for t in ts)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b) -> Tensor:
    a, b = _raw(a), _raw(b)
    out = _result(a.data + b.data, _wants_grad(a, b))
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _raw(a), _raw(b)
    out = _result(a.data - b.data, _wants_grad(a, b))
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _raw(a), _raw(b)
    out = _result(a.data * b.data, _wants_grad(a, b))

    def adjoint(g):
        return (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), adjoint)


def div(a, b) -> Tensor:
    a, b = _raw(a), _raw(b)
    out = _result(a.data / b.data, _wants_grad(a, b))

    def adjoint(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return (ga, gb)

    return _record(out, (a, b), adjoint)


def neg(a) -> Tensor:
    a = _raw(a)
    out = _result(-a.data, _wants_grad(a))
    return _record(out, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Stacked matrix product; both operands must be at least rank 2."""
    a, b = _raw(a), _raw(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = _result(a.data @ b.data, _wants_grad(a, b))

    def adjoint(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return (ga, gb)

    return _record(out, (a, b), adjoint)


def exp(a) -> Tensor:
    a = _raw(a)
    out = _result(np.exp(a.data), _wants_grad(a))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a) -> Tensor:
    a = _raw(a)
    out = _result(np.log(a.data), _wants_grad(a))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _raw(a)
    out = _result(np.sqrt(a.data), _wants_grad(a))
    return _record(out, (a,), lambda g: (g * (0.5 / out.data),))


def gelu(a) -> Tensor:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    a = _raw(a)
    cdf = 0.5 * (1.0 + _erf(a.data / _SQRT2))
    out = _result(a.data * cdf, _wants_grad(a))

    def adjoint(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        return (g * (cdf + a.data * pdf),)

    return _record(out, (a,), adjoint)


def clamp_min(a, lo: float) -> Tensor:
    a = _raw(a)
    out = _result(np.maximum(a.data, lo), _wants_grad(a))
    return _record(out, (a,), lambda g: (g * (a.data > lo),))


# ---------------------------------------------------------------------------
# reductions and structure


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _raw(a)
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), _wants_grad(a))

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record(out, (a,), adjoint)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _raw(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_detached(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max treated as a constant; used for shift-invariant softmax stabilization."""
    a = _raw(a)
    return _raw(a.data.max(axis=axis, keepdims=keepdims))


def reshape(a, shape) -> Tensor:
    a = _raw(a)
    out = _result(a.data.reshape(shape), _wants_grad(a))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes) -> Tensor:
    a = _raw(a)
    out = _result(np.transpose(a.data, axes), _wants_grad(a))
    inverse = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_raw(t) for t in tensors]
    out = _result(np.concatenate([t.data for t in ts], axis=axis), _wants_grad(*ts))
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def adjoint(g):
        pieces = []
        for k in range(len(ts)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[k], offsets[k + 1])
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return _record(out, tuple(ts), adjoint)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _raw(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = _result(a.data[index].copy(), _wants_grad(a))

    def adjoint(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(out, (a,), adjoint)


def gather_rows(a, indices) -> Tensor:
    """Select rows along axis 0; repeated indices accumulate their adjoints."""
    a = _raw(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = _result(a.data[idx], _wants_grad(a))

    def adjoint(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (a,), adjoint)


def select_index(a, indices) -> Tensor:
    """Per-row column pick: out[k] = a[k, indices[k]]."""
    a = _raw(a)
    if a.ndim != 2:
        raise ShapeError("select_index expects a rank-2 tensor")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.shape[0] != a.data.shape[0]:
        raise ShapeError("select_index needs one column index per row")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise IndexError("select_index column out of range")
    rows = np.arange(a.data.shape[0])
    out = _result(a.data[rows, idx].copy(), _wants_grad(a))

    def adjoint(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _record(out, (a,), adjoint)


def expand_lead(a, n: int) -> Tensor:
    """Tile a tensor along a new leading axis of length n."""
    a = _raw(a)
    out = _result(np.broadcast_to(a.data[None], (n,) + a.data.shape).copy(), _wants_grad(a))
    return _record(out, (a,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# composite public ops


def softmax(logits, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax, stabilized by subtracting the (detached) max."""
    logits = _raw(logits)
    if not temperature > 0.0:
        raise DomainError(f"softmax temperature must be positive, got {temperature}")
    if np.isnan(logits.data).any():
        raise DomainError("softmax input contains NaN")
    shifted = mul(sub(logits, max_detached(logits, axis=axis, keepdims=True)), 1.0 / temperature)
    e = exp(shifted)
    return div(e, sum_(e, axis=axis, keepdims=True))


def cross_entropy_mean(probabilities, targets) -> Tensor:
    """Mean negative log-likelihood of target entries in rows of probabilities.

    Rows must already be probability vectors (sum to 1 within 1e-9). The log is
    clamped at 1e-12 so a zero probability cannot produce -inf.
    """
    probabilities = _raw(probabilities)
    p = probabilities.data
    if p.ndim == 1:
        probabilities = reshape(probabilities, (1, p.shape[0]))
        p = probabilities.data
    if p.ndim != 2:
        raise ShapeError("cross_entropy_mean expects a batch of probability rows")
    sums = p.sum(axis=1)
    if np.max(np.abs(sums - 1.0)) > 1e-9:
        raise DomainError("cross_entropy_mean rows must sum to 1 within 1e-9")
    picked = select_index(probabilities, np.atleast_1d(targets))
    return neg(mean_(log(clamp_min(picked, LOG_CLAMP))))


def attention_weights(q, K, temperature_scale: bool = True):
    q = _raw(q)
    K = _raw(K)
    if q.ndim != 1 or K.ndim != 2 or q.shape[0] != K.shape[1]:
        raise ShapeError(f"attention expects q (d,) and K (N, d); got {q.shape} and {K.shape}")
    d = q.shape[0]
    q2 = reshape(q, (1, d))
    scores = matmul(q2, transpose(K, (1, 0)))
    if temperature_scale:
        scores = mul(scores, 1.0 / math.sqrt(d))
    return softmax(scores, axis=-1)


def scaled_dot_attention(q, K, V) -> Tensor:
    """Single-query attention: softmax(q K^T / sqrt(d)) V, returned as a vector."""
    V = _raw(V)
    w = attention_weights(q, K)
    if V.ndim != 2 or V.shape[0] == 0 or w.shape[1] != V.shape[0]:
        raise ShapeError(f"attention V must be (N, d_v) matching K rows; got {V.shape}")
    out = matmul(w, V)
    return reshape(out, (V.shape[1],))


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Rows scaled to unit Euclidean norm; near-zero rows are a domain error."""
    a = _raw(a)
    norms_sq = sum_(mul(a, a), axis=axis, keepdims=True)
    if np.min(norms_sq.data) < 1e-24:
        raise DomainError("l2_normalize given a vector with norm below 1e-12")
    return div(a, sqrt(norms_sq))


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted-dropout mask as a constant tensor (keep-prob scaling built in)."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(shape) >= rate).astype(np.float64)
    return _raw(keep / (1.0 - rate))


# ---------------------------------------------------------------------------
# parameters and the finite-difference oracle


class Parameter:
    """Named leaf tensor with a trainability flag."""

    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.tensor = Tensor(np.asarray(value, dtype=np.float64), requires_grad=trainable)
        self.trainable = trainable

    def set_trainable(self, flag: bool):
        self.trainable = bool(flag)
        self.tensor.requires_grad = self.trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, trainable={self.trainable})"


def finite_difference_check(model, batch, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The model must be deterministic (no active dropout). Central differences use
    the given step per scalar; errors are relative to max(1, |analytic|). Models
    may expose ``staged_loss_evaluator`` to reuse cached pipeline stages whose
    inputs a perturbation cannot touch; the evaluated loss is bit-identical to a
    full recomputation, only redundant work is skipped.
    """
    if getattr(model, "is_stochastic", lambda: False)():
        raise PreconditionError("finite_difference_check requires a deterministic model")
    grads = model.loss_and_gradients(batch)
    make_staged = getattr(model, "staged_loss_evaluator", None)
    if make_staged is not None:
        evaluator = make_staged(batch)
    else:
        class _Full:
            def stage_of(self, name):
                return 0

            def loss(self, stage):
                return model.loss_value(batch)

        evaluator = _Full()

    worst = 0.0
    for param in model.trainable_parameters():
        analytic = grads[param.name]
        stage = evaluator.stage_of(param.name)
        flat = param.tensor.data.reshape(-1)
        if not np.shares_memory(flat, param.tensor.data):
            raise PreconditionError(f"parameter {param.name} is not contiguous")
        a_flat = analytic.reshape(-1)
        for k in range(flat.shape[0]):
            original = flat[k]
            flat[k] = original + step
            up = evaluator.loss(stage)
            flat[k] = original - step
            down = evaluator.loss(stage)
            flat[k] = original
            fd = (up - down) / (2.0 * step)
            err = abs(a_flat[k] - fd) / max(1.0, abs(a_flat[k]))
            if err > worst:
                worst = err
        evaluator.loss(evaluator.stage_of(param.name))  # restore caches for next param
    return worst
