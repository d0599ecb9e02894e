"""Small reverse-mode autodiff engine on float64 numpy arrays.

Only what the Q-networks need is here: dense and GRU layers, set
aggregation over variable-size segments, softmax helpers, gradient
clipping and the Adam / RMSProp optimizers.

Every op checks its output for NaN/Inf and raises ``NumericError``.
When no input requires a gradient the op records nothing, so the same
code path serves inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError

AGGREGATIONS = ("SUM", "MEAN", "MAX")
ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "op", "_consumed")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data.reshape(-1)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self):
        return backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _check(out, op):
    # A finite sum implies finite entries; only fall back when it is not.
    if not math.isfinite(np.sum(out)) and not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite value produced by {op}")
    return out


def _make(out, parents, backward_fn, op):
    _check(out, op)
    if any(p.requires_grad for p in parents):
        return Tensor(out, True, parents, backward_fn, op)
    return Tensor(out, op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def one_minus(a) -> Tensor:
    a = as_tensor(a)
    return _make(1.0 - a.data, (a,), lambda g: (-g,), "one_minus")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def identity(a) -> Tensor:
    return as_tensor(a)


_ACT = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "identity": identity}


def activate(a, activation: str) -> Tensor:
    try:
        return _ACT[activation](a)
    except KeyError:
        raise ContractError(f"unknown activation {activation!r}") from None


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        if a.data.ndim == 1:
            return g @ b.data.T, np.outer(a.data, g)
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), back, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def gather(q, index) -> Tensor:
    """Row-wise pick ``q[i, index[i]]``."""
    q = as_tensor(q)
    index = np.asarray(index, dtype=np.int64)
    if q.data.ndim != 2 or index.shape != (q.shape[0],):
        raise ShapeError(f"gather {q.shape} with index {index.shape}")
    rows = np.arange(q.shape[0])
    out = q.data[rows, index]

    def back(g):
        full = np.zeros_like(q.data)
        full[rows, index] = g
        return (full,)

    return _make(out, (q,), back, "gather")


def total(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(np.sum(a.data), (a,), lambda g: (np.full(shape, g),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    shape = a.shape
    return _make(np.sum(a.data) / n, (a,), lambda g: (np.full(shape, g / n),), "mean")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------- set aggregation

def segment_aggregate(kind: str, items, segments, n_segments: int) -> Tensor:
    """Reduce rows of ``items`` (M, d) into ``n_segments`` rows by segment id.

    Empty segments yield zero rows.  Sums run in row order; the MAX
    gradient goes to the first row attaining the maximum.
    """
    items = as_tensor(items)
    seg = np.asarray(segments, dtype=np.int64)
    if items.data.ndim != 2 or seg.shape != (items.shape[0],):
        raise ShapeError(f"segment_aggregate items {items.shape}, segments {seg.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= n_segments):
        raise ShapeError("segment id out of range")
    d = items.shape[1]
    x = items.data
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)

    if kind in ("SUM", "MEAN"):
        out = np.zeros((n_segments, d))
        np.add.at(out, seg, x)
        if kind == "MEAN":
            inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
            out = out * inv[:, None]

            def back(g):
                return (g[seg] * inv[seg][:, None],)
        else:
            def back(g):
                return (g[seg],)
        return _make(out, (items,), back, f"aggregate_{kind.lower()}")

    if kind == "MAX":
        out = np.full((n_segments, d), -np.inf)
        np.maximum.at(out, seg, x)
        out[counts == 0] = 0.0
        m = x.shape[0]
        first = np.full((n_segments, d), m, dtype=np.int64)
        if m:
            hit = x == out[seg]
            cand = np.where(hit, np.arange(m)[:, None], m)
            np.minimum.at(first, seg, cand)

        def back(g):
            gi = np.zeros_like(x)
            rows, cols = np.nonzero(first < m)
            np.add.at(gi, (first[rows, cols], cols), g[rows, cols])
            return (gi,)

        return _make(out, (items,), back, "aggregate_max")

    raise ContractError(f"unknown aggregation {kind!r}")


def aggregate(kind: str, items) -> Tensor:
    """Aggregate a set of equal-shape vectors into one vector.

    ``items`` is a (k, d) tensor or a sequence of length-d vectors; k may
    be zero only when given as a (0, d) array.
    """
    if isinstance(items, Tensor):
        stacked = items
    elif isinstance(items, np.ndarray):
        stacked = Tensor(items)
    else:
        items = [as_tensor(v) for v in items]
        widths = {v.shape for v in items}
        if len(widths) > 1:
            raise ShapeError(f"aggregate items of differing shapes {sorted(widths)}")
        stacked = concat([reshape(v, (1, -1)) for v in items], axis=0)
    if stacked.data.ndim != 2:
        raise ShapeError("aggregate expects a (k, d) stack of vectors")
    out = segment_aggregate(kind, stacked, np.zeros(stacked.shape[0], dtype=np.int64), 1)
    return reshape(out, (stacked.shape[1],))


# ---------------------------------------------------------------- layers

def dense(x, weight, bias, activation="identity") -> Tensor:
    """``activation(x @ weight + bias)``; weight is (in, out)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return activate(add(matmul(x, weight), bias), activation)


GRU_PARAM_NAMES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def gru_step(x, h, params) -> Tensor:
    """One GRU cell update.

    z = sigmoid(x W_z + h U_z + b_z), r likewise,
    cand = tanh(x W_h + (r * h) U_h + b_h), h' = (1 - z) * h + z * cand.
    """
    x, h = as_tensor(x), as_tensor(h)
    width = params["U_z"].shape[0]
    if h.shape[-1] != width:
        raise ShapeError(f"hidden width {h.shape[-1]} != GRU width {width}")
    if x.shape[-1] != params["W_z"].shape[0]:
        raise ShapeError(f"GRU input width {x.shape[-1]} != {params['W_z'].shape[0]}")
    z = sigmoid(add(add(matmul(x, params["W_z"]), matmul(h, params["U_z"])), params["b_z"]))
    r = sigmoid(add(add(matmul(x, params["W_r"]), matmul(h, params["U_r"])), params["b_r"]))
    cand = tanh(add(add(matmul(x, params["W_h"]), matmul(mul(r, h), params["U_h"])), params["b_h"]))
    return add(mul(one_minus(z), h), mul(z, cand))


def softmax_t(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis (max-shifted)."""
    if not temperature > 0:
        raise DomainError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- backward

class Graph:
    """Topologically ordered view of the ops that produced ``loss``."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        order, seen = [], set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, params: dict[str, Tensor] | None = None):
    """Accumulate d(loss)/d(node) into ``.grad`` of every leaf.

    Returns ``{name: grad}`` for ``params`` when given (zeros for params
    the loss does not depend on).
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise ContractError("backward already ran on this graph; run forward again")
    if loss.requires_grad:
        graph = Graph(loss)
        loss.grad = np.ones_like(loss.data)
        for node in reversed(graph.nodes):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            node._backward = None
            node._consumed = True
            if node is not loss:
                node.grad = None
    loss._consumed = True
    if params is None:
        return None
    out = {}
    for name, p in params.items():
        out[name] = np.zeros_like(p.data) if p.grad is None else p.grad
    return out


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 10.0):
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before)``.
    """
    sq = 0.0
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
        sq += float(np.sum(g * g))
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        factor = max_norm / norm
        return {k: g * factor for k, g in grads.items()}, norm
    return dict(grads), norm


# ---------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    kind: str = "Adam"
    learning_rate: float = 1e-4
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    alpha: float = 0.99
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("Adam", "RMSProp"):
            raise ContractError(f"unknown optimizer {self.kind!r}")


def make_optimizer(kind="Adam", learning_rate=1e-4, eps=None, **kw) -> OptimizerState:
    if eps is None:
        eps = 1e-8 if kind == "Adam" else 1e-5
    return OptimizerState(kind=kind, learning_rate=learning_rate, eps=eps, **kw)


def optimizer_step(state: OptimizerState, params: dict[str, np.ndarray],
                   grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Return updated parameters; moment buffers in ``state`` advance in place."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None or g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} does not match parameter shape {p.shape}")
    state.step += 1
    t = state.step
    lr = state.learning_rate
    out = {}
    for name, p in params.items():
        g = grads[name]
        if state.kind == "Adam":
            m = state.first_moment.get(name, np.zeros_like(p))
            v = state.second_moment.get(name, np.zeros_like(p))
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            state.first_moment[name] = m
            state.second_moment[name] = v
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            v = state.second_moment.get(name, np.zeros_like(p))
            v = state.alpha * v + (1.0 - state.alpha) * g * g
            state.second_moment[name] = v
            out[name] = p - lr * g / (np.sqrt(v) + state.eps)
    return out
