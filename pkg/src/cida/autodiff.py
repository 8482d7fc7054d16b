"""Minimal reverse-mode automatic differentiation over float64 arrays.

Operations are recorded on the active :class:`Tape` whenever one of their
inputs requires a gradient.  ``tape.backward(out)`` then walks the recorded
nodes in reverse creation order, which is a valid reverse topological order
because a node can only consume tensors that already exist.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "Adam",
    "NonFiniteError",
    "DetachedError",
    "NonSmoothPointError",
    "forward",
    "backward",
    "no_grad",
    "grad_check",
    "adam_step",
    "grl_backward_scale",
    "PRIMITIVES",
]


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared at an operation boundary."""


class DetachedError(RuntimeError):
    """``backward`` was called on a tensor that was not produced on the tape."""


class NonSmoothPointError(ValueError):
    """Finite differences straddle a kink, so the derivative is not defined."""


_TAPES: list["Tape"] = []
_GRAD_ENABLED = [True]


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by '{where}'")


class Tensor:
    """Dense float64 array that may take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node = None

    @classmethod
    def _result(cls, arr: np.ndarray, op: str) -> "Tensor":
        _check_finite(arr, op)
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, "detach")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    def square(self):
        return square(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable
    tape: "Tape"


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def forward(self, op_name: str, *inputs, **kwargs) -> Tensor:
        return forward(self, op_name, *inputs, **kwargs)

    def backward(self, output: Tensor) -> None:
        backward(self, output)


def _record(op: str, out: Tensor, inputs: tuple, vjp: Callable) -> Tensor:
    if not _GRAD_ENABLED[-1] or not _TAPES:
        return out
    if not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return out
    tape = _TAPES[-1]
    out.requires_grad = True
    out._node = Node(op, inputs, out, vjp, tape)
    tape.nodes.append(out._node)
    return out


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the active tape."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def backward(tape: Tape, output: Tensor) -> None:
    """Fill ``.grad`` of every requires-grad leaf reachable from ``output``."""
    if output.data.size != 1 or output.data.ndim > 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    node = output._node
    if node is None:
        if output.requires_grad:
            output.grad = output.grad + np.ones_like(output.data)
        return
    if node.tape is not tape:
        raise DetachedError("output was not recorded on this tape")
    pending = {id(output): np.ones_like(output.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        grads = node.vjp(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = inp.grad + gi if inp.grad is not None else gi.copy()
            else:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _need(t) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor._result(a.data @ b.data, "matmul")

    def vjp(g):
        return (g @ b.data.T if _need(a) else None, a.data.T @ g if _need(b) else None)

    return _record("matmul", out, (a, b), vjp)


def linear(x, w, b) -> Tensor:
    """Fused ``x @ w + b`` with ``b`` broadcast over the batch."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    out = Tensor._result(x.data @ w.data + b.data, "linear")

    def vjp(g):
        return (
            g @ w.data.T if _need(x) else None,
            x.data.T @ g if _need(w) else None,
            g.sum(axis=0) if _need(b) else None,
        )

    return _record("linear", out, (x, w, b), vjp)


def _binary_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b, "add")
    out = Tensor._result(a.data + b.data, "add")

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if _need(a) else None,
            _unbroadcast(g, b.shape) if _need(b) else None,
        )

    return _record("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b, "sub")
    out = Tensor._result(a.data - b.data, "sub")

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if _need(a) else None,
            _unbroadcast(-g, b.shape) if _need(b) else None,
        )

    return _record("sub", out, (a, b), vjp)


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b, "multiply")
    out = Tensor._result(a.data * b.data, "multiply")

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.shape) if _need(a) else None,
            _unbroadcast(g * a.data, b.shape) if _need(b) else None,
        )

    return _record("multiply", out, (a, b), vjp)


def divide(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape(a, b, "divide")
    if (b.data == 0).any():
        raise ZeroDivisionError("divide: zero denominator")
    out = Tensor._result(a.data / b.data, "divide")

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape) if _need(a) else None,
            _unbroadcast(-g * out.data / b.data, b.shape) if _need(b) else None,
        )

    return _record("divide", out, (a, b), vjp)


def negate(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor._result(-a.data, "negate")
    return _record("negate", out, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = Tensor._result(np.exp(a.data), "exp")
    return _record("exp", out, (a,), lambda g: (g * out.data,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data <= 0).any():
        raise ValueError("log: non-positive operand")
    out = Tensor._result(np.log(a.data), "log")
    return _record("log", out, (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor._result(np.tanh(a.data), "tanh")
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out.data**2),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    out = Tensor._result(a.data * mask, "relu")
    return _record("relu", out, (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor._result(np.logaddexp(0.0, a.data), "softplus")

    def vjp(g):
        # logistic sigmoid, written to avoid overflow for large |x|
        return (g * np.exp(-np.logaddexp(0.0, -a.data)),)

    return _record("softplus", out, (a,), vjp)


def square(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor._result(a.data * a.data, "square")
    return _record("square", out, (a,), lambda g: (2.0 * g * a.data,))


def tsum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor._result(np.asarray(a.data.sum(axis=axis)), "sum")

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", out, (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    if count == 0:
        raise ValueError("mean: empty reduction")
    out = Tensor._result(np.asarray(a.data.mean(axis=axis)), "mean")

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record("mean", out, (a,), vjp)


def concat(tensors: Sequence) -> Tensor:
    """Concatenate along the last axis."""
    ts = tuple(_as_tensor(t) for t in tensors)
    lead = {t.shape[:-1] for t in ts}
    if len(lead) != 1:
        raise ValueError(f"concat: leading shapes differ {[t.shape for t in ts]}")
    out = Tensor._result(np.concatenate([t.data for t in ts], axis=-1), "concat")
    bounds = np.cumsum([0] + [t.shape[-1] for t in ts])

    def vjp(g):
        return tuple(
            g[..., lo:hi] if _need(t) else None for t, lo, hi in zip(ts, bounds[:-1], bounds[1:])
        )

    return _record("concat", out, ts, vjp)


def select_rows(a, index) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("select_rows: index must be 1-D")
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise IndexError("select_rows: index out of range")
    out = Tensor._result(a.data[idx], "select_rows")

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record("select_rows", out, (a,), vjp)


def slice_last(a, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    a = _as_tensor(a)
    out = Tensor._result(a.data[..., start:stop], "slice_last")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _record("slice_last", out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor._result(a.data.reshape(shape), "reshape")
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def logsumexp(a, weights=None) -> Tensor:
    """Stable ``log(sum(w * exp(a)))`` over the last axis.

    ``weights`` defaults to ones.  Zero weights are allowed; they drop the
    corresponding term without ever taking ``log(0)``.
    """
    a = _as_tensor(a)
    w = None if weights is None else _as_tensor(weights)
    if w is not None:
        if w.shape != a.shape:
            raise ValueError(f"logsumexp: weight shape {w.shape} != {a.shape}")
        if (w.data < 0).any():
            raise ValueError("logsumexp: negative weight")
        live = w.data > 0
        if not live.any(axis=-1).all():
            raise ValueError("logsumexp: a row has no positive weight")
        masked = np.where(live, a.data, -np.inf)
    else:
        masked = a.data
    shift = masked.max(axis=-1, keepdims=True)
    with np.errstate(over="ignore"):
        e = np.exp(a.data - shift)
    s = (e if w is None else w.data * e).sum(axis=-1, keepdims=True)
    out = Tensor._result((np.log(s) + shift)[..., 0], "logsumexp")

    def vjp(g):
        ratio = e / s  # exp(a - out)
        g = g[..., None]
        if w is None:
            return (g * ratio,)
        return (g * w.data * ratio if _need(a) else None, g * ratio if _need(w) else None)

    inputs = (a,) if w is None else (a, w)
    return _record("logsumexp", out, inputs, vjp)


def log_softmax(a) -> Tensor:
    """Stable log-softmax over the last axis."""
    a = _as_tensor(a)
    shift = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - shift
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor._result(shifted - lse, "log_softmax")

    def vjp(g):
        return (g - np.exp(out.data) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", out, (a,), vjp)


def softmax(a) -> Tensor:
    return exp(log_softmax(a))


def grl_backward_scale(upstream_grad, lam: float):
    """Backward rule of gradient reversal: scale the upstream gradient by ``-lam``."""
    if lam < 0:
        raise ValueError("gradient reversal scale must be non-negative")
    return -lam * np.asarray(upstream_grad, dtype=np.float64)


def grad_reverse(a, lam: float = 1.0) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam`` backward."""
    if lam < 0:
        raise ValueError("gradient reversal scale must be non-negative")
    a = _as_tensor(a)
    out = Tensor._result(a.data.copy(), "grad_reverse")
    return _record("grad_reverse", out, (a,), lambda g: (grl_backward_scale(g, lam),))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "linear": linear,
    "add": add,
    "sub": sub,
    "multiply": multiply,
    "divide": divide,
    "negate": negate,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "relu": relu,
    "softplus": softplus,
    "square": square,
    "sum": tsum,
    "mean": mean,
    "concat": lambda *ts: concat(ts),
    "select_rows": select_rows,
    "slice_last": slice_last,
    "reshape": reshape,
    "logsumexp": logsumexp,
    "log_softmax": log_softmax,
    "softmax": softmax,
    "grad_reverse": grad_reverse,
}


def forward(tape: Tape, op_name: str, *inputs, **kwargs) -> Tensor:
    """Apply primitive ``op_name`` and record it on ``tape``."""
    try:
        fn = PRIMITIVES[op_name]
    except KeyError:
        raise ValueError(f"unknown primitive '{op_name}'") from None
    if tape in _TAPES and _TAPES[-1] is tape:
        return fn(*inputs, **kwargs)
    with tape:
        return fn(*inputs, **kwargs)


# ------------------------------------------------------------ gradient check


def grad_check(function: Callable[[Tensor], Tensor], point, step: float = 1e-6) -> float:
    """Largest relative gap between the tape gradient and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Raises :class:`NonSmoothPointError` when forward and backward one-sided
    slopes disagree by far more than curvature allows.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = function(x)
    tape.backward(out)
    analytic = x.grad.reshape(-1)

    def f(v: np.ndarray) -> float:
        with no_grad():
            val = function(Tensor(v)).data
        val = float(np.asarray(val).reshape(-1)[0])
        if not np.isfinite(val):
            raise NonFiniteError("function is not finite at a probe point")
        return val

    f0 = float(out.data.reshape(-1)[0])
    flat = x0.reshape(-1)
    worst = 0.0
    kink_tol = max(1e-3, 100.0 * step)
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] += step
        fp = f(probe.reshape(x0.shape))
        probe[i] -= 2.0 * step
        fm = f(probe.reshape(x0.shape))
        numeric = (fp - fm) / (2.0 * step)
        if abs((fp - f0) - (f0 - fm)) / step > kink_tol * max(1.0, abs(numeric)):
            raise NonSmoothPointError(f"coordinate {i} sits on a kink; probe elsewhere")
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return worst


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and state lengths differ")
    for p, g, m in zip(params, grads, state.m):
        if p.data.shape != np.shape(g) or m.shape != p.data.shape:
            raise ValueError(f"adam_step: shape mismatch for parameter {p.data.shape}")
        _check_finite(np.asarray(g), "adam_step gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class Adam:
    """Adam over a fixed parameter list, reading gradients from ``.grad``."""

    params: list
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.for_params(
            self.params, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
