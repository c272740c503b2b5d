"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every operation computes its value eagerly with numpy and, when a
:class:`Tape` is active, records a node holding the inputs and a
backward closure.  With no tape active the same functions are plain
numpy math, which is how evaluation-only code paths (sampling,
validation, metric probes) run without autodiff overhead.

Gradients accumulate into ``Tensor.grad``; callers zero grads between
steps.  ``backward`` walks the tape in reverse recording order, which
is a valid topological order because nodes are appended as they are
created.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "stop_recording",
    "backward",
    "grad_check",
    "zero_grads",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "one_minus",
    "sigmoid",
    "tanh",
    "relu",
    "log",
    "clip",
    "softmax",
    "softmax_cross_entropy",
    "softmax_cross_entropy_rows",
    "embed",
    "concat",
    "reshape",
    "sum_all",
    "mean_all",
    "mean_axis0",
]


class Tensor:
    """A row-major float64 array plus an optional same-shaped gradient."""

    __slots__ = ("data", "grad", "node_id")

    def __init__(self, data, copy: bool = True):
        if copy:
            arr = np.array(data, dtype=np.float64)
        else:
            arr = np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values, cut off from any tape."""
        return Tensor(self.data, copy=False)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data!r})"


# The innermost entry is the recording target.  A None entry disables
# recording, so evaluation code can run inside a training tape.
_TAPES: list["Tape | None"] = []


class Tape:
    """Ordered record of primitive ops, used once for one backward pass."""

    def __init__(self):
        # node: (out tensor, input tensors, backward closure)
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tape stack out of balance"

    def __len__(self) -> int:
        return len(self.nodes)


class _RecordingOff:
    def __enter__(self):
        _TAPES.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()


def stop_recording() -> _RecordingOff:
    """Context manager suppressing tape recording for evaluation-only math."""
    return _RecordingOff()


def _record(out: Tensor, inputs: tuple[Tensor, ...], backfn: Callable) -> Tensor:
    if _TAPES:
        tape = _TAPES[-1]
        if tape is not None:
            out.node_id = len(tape.nodes)
            tape.nodes.append((out, inputs, backfn))
    return out


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] | None = None) -> None:
    """Reverse sweep over ``tape`` accumulating gradients of ``loss``.

    Gradients add into each input tensor's ``grad``; the caller is
    responsible for zeroing between steps.  When ``params`` is given,
    any of them left untouched by the sweep (not reachable from the
    loss) gets an exact zero gradient.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    # Reset node-output grads so a second backward on the same tape is
    # bit-identical to the first rather than compounding.
    for out, _, _ in tape.nodes:
        out.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for out, inputs, backfn in reversed(tape.nodes):
        g = out.grad
        if g is None:
            continue
        for t, gi in zip(inputs, backfn(g)):
            if gi is None:
                continue
            if t.grad is None:
                # Own the array: backward closures may hand out views.
                t.grad = np.array(gi)
            else:
                t.grad += gi
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a: Tensor, b: Tensor, fwd, da, db, name: str) -> Tensor:
    try:
        out = Tensor(fwd(a.data, b.data), copy=False)
    except ValueError as e:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}") from e
    ash, bsh = a.shape, b.shape

    def back(g):
        return (_unbroadcast(da(g, a.data, b.data), ash),
                _unbroadcast(db(g, a.data, b.data), bsh))

    return _record(out, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c, copy=False)
    return _record(out, (a,), lambda g: (g * c,))


def one_minus(a: Tensor) -> Tensor:
    out = Tensor(1.0 - a.data, copy=False)
    return _record(out, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2D x 2D, 2D x 1D and 1D x 2D operands."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")
        out = Tensor(ad @ bd, copy=False)

        def back(g):
            return g @ bd.T, ad.T @ g

    elif ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")
        out = Tensor(ad @ bd, copy=False)

        def back(g):
            return np.outer(g, bd), ad.T @ g

    elif ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ValueError(f"matmul: inner dims differ, {ad.shape} @ {bd.shape}")
        out = Tensor(ad @ bd, copy=False)

        def back(g):
            return bd @ g, np.outer(ad, g)

    else:
        raise ValueError(f"matmul: unsupported ranks {ad.ndim} and {bd.ndim}")
    return _record(out, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a 2D tensor, got shape {a.shape}")
    out = Tensor(a.data.T, copy=False)
    return _record(out, (a,), lambda g: (g.T,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    out = Tensor(s, copy=False)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t, copy=False)
    return _record(out, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    out = Tensor(np.maximum(ad, 0.0), copy=False)
    return _record(out, (a,), lambda g: (g * (ad > 0.0),))


def log(a: Tensor) -> Tensor:
    ad = a.data
    if not np.all(ad > 0.0):
        raise ValueError("log: inputs must be strictly positive")
    out = Tensor(np.log(ad), copy=False)
    return _record(out, (a,), lambda g: (g / ad,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is 1 strictly inside and exactly 0 outside."""
    if not lo < hi:
        raise ValueError(f"clip: need lo < hi, got [{lo}, {hi}]")
    ad = a.data
    out = Tensor(np.clip(ad, lo, hi), copy=False)
    mask = (ad > lo) & (ad < hi)
    return _record(out, (a,), lambda g: (g * mask,))


def _stable_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    s = _stable_softmax(a.data)
    out = Tensor(s, copy=False)

    def back(g):
        inner = np.sum(g * s, axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _record(out, (a,), back)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log softmax probability of ``target`` for a 1D logit vector.

    The gradient of the fused op is ``softmax(logits) - one_hot(target)``.
    """
    x = logits.data
    if x.ndim != 1:
        raise ValueError(f"softmax_cross_entropy expects 1D logits, got {logits.shape}")
    t = int(target)
    if not 0 <= t < x.shape[0]:
        raise ValueError(f"target {t} out of range for {x.shape[0]} classes")
    m = np.max(x)
    lse = m + np.log(np.sum(np.exp(x - m)))
    out = Tensor(np.asarray(lse - x[t]), copy=False)

    def back(g):
        p = _stable_softmax(x).copy()
        p[t] -= 1.0
        return (p * g,)

    return _record(out, (logits,), back)


def softmax_cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Row-wise fused cross entropy: [M, V] logits and M targets give M losses."""
    x = logits.data
    if x.ndim != 2:
        raise ValueError(f"softmax_cross_entropy_rows expects 2D logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (x.shape[0],):
        raise ValueError(f"targets shape {t.shape} does not match {x.shape[0]} rows")
    if np.any(t < 0) or np.any(t >= x.shape[1]):
        raise ValueError(f"target out of range for {x.shape[1]} classes")
    m = np.max(x, axis=-1)
    lse = m + np.log(np.sum(np.exp(x - m[:, None]), axis=-1))
    out = Tensor(lse - x[np.arange(x.shape[0]), t], copy=False)

    def back(g):
        p = _stable_softmax(x).copy()
        p[np.arange(x.shape[0]), t] -= 1.0
        return (p * g[:, None],)

    return _record(out, (logits,), back)


def embed(table: Tensor, ids) -> Tensor:
    """Row lookup into ``table``; the gradient scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    rows = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise ValueError(f"symbol id out of range for table with {rows} rows")
    out = Tensor(table.data[idx], copy=False)

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat of an empty sequence")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), copy=False)
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(parts), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    out = Tensor(a.data.reshape(shape), copy=False)
    return _record(out, (a,), lambda g: (g.reshape(src),))


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(np.sum(a.data)), copy=False)
    shape = a.shape
    return _record(out, (a,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.asarray(np.sum(a.data) / n), copy=False)
    shape = a.shape
    return _record(out, (a,), lambda g: (np.broadcast_to(g / n, shape),))


def mean_axis0(a: Tensor) -> Tensor:
    """Mean over the leading axis; used for pooling per-step scores."""
    if a.data.ndim < 1 or a.data.shape[0] == 0:
        raise ValueError(f"mean_axis0 on shape {a.shape}")
    n = a.data.shape[0]
    out = Tensor(np.sum(a.data, axis=0) / n, copy=False)
    shape = a.shape

    def back(g):
        return (np.broadcast_to(g / n, shape),)

    return _record(out, (a,), back)


def grad_check(f: Callable, params: Sequence[Tensor], epsilon: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f(params)`` must rebuild the scalar loss from scratch on every
    call and must not open its own tape; ``grad_check`` records the
    analytic pass itself and evaluates the probes without recording.
    The relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as the
    denominator.
    """
    params = list(params)
    zero_grads(params)
    with Tape() as tape:
        loss = f(params)
    backward(tape, loss, params=params)
    analytic = [p.grad.copy() for p in params]

    def value() -> float:
        with stop_recording():
            return float(f(params).data)

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = value()
            flat[i] = orig - epsilon
            fm = value()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * epsilon)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
