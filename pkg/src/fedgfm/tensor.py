"""Small reverse-mode differentiation kernel over numpy arrays.

Only the primitives the model needs are provided. Every primitive is a
(forward, vjp) pair; a :class:`Tape` records applications in execution order
so that :func:`backward` can walk it in reverse.

    tape = Tape()
    w = tape.param(np.array([3.0]), "w")
    loss = sum_all(square(w))
    grads = backward(tape, loss)      # {"w": array([6.])}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NumericError

DTYPE = np.float64
NORM_CLAMP = 1e-12


class Tensor:
    """A forward value plus the bookkeeping needed to differentiate it."""

    __slots__ = ("value", "tape", "id", "name")

    def __init__(self, value, tape: "Tape | None" = None, id: int = -1, name: str | None = None):
        self.value = value
        self.tape = tape
        self.id = id
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.reshape(-1)

    def __repr__(self) -> str:
        label = self.name or f"#{self.id}"
        return f"Tensor({label}, shape={self.shape})"

    # operator sugar, kept to the primitive set
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Op:
    id: int
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable
    vjp: Callable


@dataclass
class Tape:
    """Execution record. Confined to one thread; not reused across passes."""

    ops: list[Op] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)
    leaves: list[Tensor] = field(default_factory=list)
    discrete: dict[str, np.ndarray] = field(default_factory=dict)
    check_finite: bool = True
    # stop-gradient outputs, logged in order; when ``frozen`` is set those
    # logged values are replayed instead (surrogate evaluation for FD checks)
    sg_log: list[np.ndarray] = field(default_factory=list)
    frozen: list[np.ndarray] | None = None
    _next_id: int = 0

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def param(self, value, name: str) -> Tensor:
        if name in self.params:
            raise ContractViolation(f"parameter {name!r} registered twice")
        t = Tensor(np.array(value, dtype=DTYPE), self, self._new_id(), name)
        self.params[name] = t
        self.leaves.append(t)
        return t

    def const(self, value, name: str | None = None) -> Tensor:
        t = Tensor(np.asarray(value, dtype=DTYPE), self, self._new_id(), name)
        self.leaves.append(t)
        return t

    def mark_discrete(self, key: str, decision) -> None:
        """Remember a discrete choice (argmax index, relu mask) made in the pass.

        The finite-difference checker compares these between perturbed passes
        to find coordinates whose eps-neighbourhood crosses a boundary.
        """
        k = key
        n = 1
        while k in self.discrete:
            n += 1
            k = f"{key}:{n}"
        self.discrete[k] = np.array(decision, copy=True)

    def _blocked(self, computed: np.ndarray) -> np.ndarray:
        i = len(self.sg_log)
        value = computed if self.frozen is None else self.frozen[i]
        self.sg_log.append(value)
        return value

    def record(self, name: str, inputs: Sequence[Tensor], forward: Callable, vjp: Callable) -> Tensor:
        values = [t.value for t in inputs]
        out = forward(*values)
        op_id = self._new_id()
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite value produced by {name} (op {op_id})", op_id=op_id)
        t = Tensor(out, self, op_id, None)
        self.ops.append(Op(op_id, name, tuple(inputs), t, forward, vjp))
        return t

    def replay(self) -> dict[int, np.ndarray]:
        """Recompute every op from the recorded leaf values; returns id -> value."""
        values: dict[int, np.ndarray] = {leaf.id: leaf.value for leaf in self.leaves}
        saved, saved_frozen = self.sg_log, self.frozen
        self.sg_log = []
        try:
            for op in self.ops:
                ins = [values[t.id] if t.id in values else t.value for t in op.inputs]
                values[op.id] = op.forward(*ins)
        finally:
            self.sg_log, self.frozen = saved, saved_frozen
        return values


class GradientMap(dict):
    """Parameter name -> gradient array, same shape as the parameter."""

    retained: dict[int, np.ndarray]

    def of(self, t: Tensor) -> np.ndarray:
        """Gradient of a tensor listed in ``backward(..., wrt=...)``."""
        return self.retained[t.id]

    def flat(self, names: Sequence[str]) -> np.ndarray:
        return np.concatenate([self[n].reshape(-1) for n in names]) if names else np.zeros(0)


def _as_tensor(x, tape: Tape | None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE), None, -1, None)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return None


def _apply(name: str, inputs: Sequence, forward: Callable, vjp: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    ts = [_as_tensor(x, tape) for x in inputs]
    if tape is None:
        out = forward(*[t.value for t in ts])
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite value produced by {name}")
        return Tensor(out)
    return tape.record(name, ts, forward, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    return _apply(
        "add",
        [a, b],
        lambda x, y: x + y,
        lambda g, x, y, out: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
    )


def sub(a, b) -> Tensor:
    return _apply(
        "sub",
        [a, b],
        lambda x, y: x - y,
        lambda g, x, y, out: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
    )


def mul(a, b) -> Tensor:
    return _apply(
        "mul",
        [a, b],
        lambda x, y: x * y,
        lambda g, x, y, out: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
    )


def scale(a, c: float) -> Tensor:
    c = float(c)
    return _apply("scale", [a], lambda x: x * c, lambda g, x, out: (g * c,))


def matmul(a, b) -> Tensor:
    def vjp(g, x, y, out):
        return g @ y.T, x.T @ g

    return _apply("matmul", [a, b], lambda x, y: x @ y, vjp)


def spmm(matrix, a) -> Tensor:
    """Constant (sparse or dense) matrix times a recorded tensor."""

    def vjp(g, x, out):
        return (np.asarray(matrix.T @ g),)

    return _apply("spmm", [a], lambda x: np.asarray(matrix @ x), vjp)


def transpose(a) -> Tensor:
    return _apply("transpose", [a], lambda x: x.T.copy(), lambda g, x, out: (g.T,))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    return _apply("reshape", [a], lambda x: x.reshape(shape), lambda g, x, out: (g.reshape(x.shape),))


def sigmoid(a) -> Tensor:
    def fwd(x):
        # split by sign to avoid overflow in exp
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _apply("sigmoid", [a], fwd, lambda g, x, out: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    tape = _tape_of(a)
    if tape is not None:
        tape.mark_discrete("relu", a.value > 0)
    return _apply("relu", [a], lambda x: np.maximum(x, 0.0), lambda g, x, out: (g * (x > 0),))


def tanh(a) -> Tensor:
    return _apply("tanh", [a], np.tanh, lambda g, x, out: (g * (1.0 - out * out),))


def identity(a) -> Tensor:
    return _apply("identity", [a], lambda x: x.copy(), lambda g, x, out: (g,))


NONLINEARITIES: dict[str, Callable] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "identity": identity,
}


def square(a) -> Tensor:
    return _apply("square", [a], lambda x: x * x, lambda g, x, out: (2.0 * g * x,))


def power(a, p: float) -> Tensor:
    """max(x, 0)**p; the clamp absorbs rounding below zero (1 - cos can be -1e-16)."""
    p = float(p)

    def vjp(g, x, out):
        if p == 1.0:
            return (g * (x >= 0),)
        return (g * p * np.power(np.maximum(x, 0.0), p - 1.0),)

    return _apply("power", [a], lambda x: np.power(np.maximum(x, 0.0), p), vjp)


def sum_all(a) -> Tensor:
    def fwd(x):
        return np.array(np.sum(x, dtype=np.float64))

    return _apply("sum", [a], fwd, lambda g, x, out: (np.full(x.shape, float(g)),))


def mean(a, axis: int | None = None) -> Tensor:
    def fwd(x):
        return np.array(np.mean(x, axis=axis, dtype=np.float64))

    def vjp(g, x, out):
        if axis is None:
            return (np.full(x.shape, float(g) / x.size),)
        n = x.shape[axis]
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _apply("mean", [a], fwd, vjp)


def rowdot(a, b) -> Tensor:
    """Row-wise inner product of two (n, d) arrays."""
    return _apply(
        "rowdot",
        [a, b],
        lambda x, y: np.einsum("ij,ij->i", x, y),
        lambda g, x, y, out: (g[:, None] * y, g[:, None] * x),
    )


def row_sq_norm(a) -> Tensor:
    """Squared L2 norm of every row: (n, d) -> (n,)."""
    return _apply(
        "row_sq_norm",
        [a],
        lambda x: np.einsum("ij,ij->i", x, x),
        lambda g, x, out: (2.0 * g[:, None] * x,),
    )


def softmax(a, axis: int = -1) -> Tensor:
    def fwd(x):
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g, x, out):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _apply("softmax", [a], fwd, vjp)


def l2_norm(a, axis: int = -1) -> Tensor:
    """Clamped L2 norm along ``axis``: max(||x||, 1e-12)."""

    def fwd(x):
        return np.maximum(np.sqrt(np.sum(x * x, axis=axis)), NORM_CLAMP)

    def vjp(g, x, out):
        active = (out > NORM_CLAMP).astype(x.dtype)
        return (np.expand_dims(g * active / out, axis) * x,)

    return _apply("l2_norm", [a], fwd, vjp)


def cosine_rows(a, b) -> Tensor:
    """Row-wise cosine similarity of two (n, d) arrays, norms clamped at 1e-12."""

    def fwd(x, y):
        nx = np.maximum(np.linalg.norm(x, axis=1), NORM_CLAMP)
        ny = np.maximum(np.linalg.norm(y, axis=1), NORM_CLAMP)
        return np.einsum("ij,ij->i", x, y) / (nx * ny)

    def vjp(g, x, y, out):
        nx_raw = np.linalg.norm(x, axis=1)
        ny_raw = np.linalg.norm(y, axis=1)
        nx = np.maximum(nx_raw, NORM_CLAMP)
        ny = np.maximum(ny_raw, NORM_CLAMP)
        ax = (nx_raw > NORM_CLAMP)[:, None]
        ay = (ny_raw > NORM_CLAMP)[:, None]
        gx = y / (nx * ny)[:, None] - np.where(ax, (out / (nx * nx))[:, None] * x, 0.0)
        gy = x / (nx * ny)[:, None] - np.where(ay, (out / (ny * ny))[:, None] * y, 0.0)
        return g[:, None] * gx, g[:, None] * gy

    return _apply("cosine_rows", [a, b], fwd, vjp)


def take_rows(table, index: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer ``index``; gradients scatter-add back."""
    index = np.asarray(index, dtype=np.int64)

    def vjp(g, x, out):
        gx = np.zeros_like(x)
        np.add.at(gx, index, g)
        return (gx,)

    return _apply("take_rows", [table], lambda x: x[index], vjp)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    sizes = [np.asarray(t.value if isinstance(t, Tensor) else t).shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fwd(*xs):
        return np.concatenate(xs, axis=axis)

    def vjp(g, *args):
        xs = args[:-1]
        out = []
        for i in range(len(xs)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _apply("concat", list(tensors), fwd, vjp)


def stop_gradient(a) -> Tensor:
    """Identity forward; blocks the gradient on the way back."""
    tape = _tape_of(a)

    def fwd(x):
        return x.copy() if tape is None else tape._blocked(x.copy())

    return _apply("stop_gradient", [a], fwd, lambda g, x, out: (np.zeros_like(x),))


def straight_through(z, z_q) -> Tensor:
    """Forward returns ``z_q`` exactly; the backward pass hands the gradient to ``z``.

    Equivalent to ``z + sg[z_q - z]`` but without the rounding of the add.
    """
    zv = z.value if isinstance(z, Tensor) else np.asarray(z)
    qv = z_q.value if isinstance(z_q, Tensor) else np.asarray(z_q)
    if zv.shape != qv.shape:
        raise ContractViolation(f"straight_through shape mismatch: {zv.shape} vs {qv.shape}")
    tape = _tape_of(z, z_q)

    def fwd(x, q):
        if tape is None or tape.frozen is None:
            if tape is not None:
                tape._blocked(q - x)
            return q.copy()
        return x + tape._blocked(q - x)

    return _apply("straight_through", [z, z_q], fwd, lambda g, x, q, out: (g, np.zeros_like(q)))


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (n, C) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)

    def fwd(x):
        shifted = x - np.max(x, axis=1, keepdims=True)
        logz = np.log(np.sum(np.exp(shifted), axis=1))
        return np.array(np.mean(logz - shifted[np.arange(len(labels)), labels]))

    def vjp(g, x, out):
        shifted = x - np.max(x, axis=1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(labels)), labels] -= 1.0
        return (float(g) * p / len(labels),)

    return _apply("cross_entropy", [logits], fwd, vjp)


def masked_bce_with_logits(logits, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over the non-NaN entries of ``targets``."""
    targets = np.asarray(targets, dtype=DTYPE)
    mask = ~np.isnan(targets)
    y = np.where(mask, targets, 0.0)
    count = max(int(mask.sum()), 1)

    def fwd(x):
        # log(1 + e^x) - y x, written stably
        loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
        return np.array(np.sum(loss * mask) / count)

    def vjp(g, x, out):
        p = 1.0 / (1.0 + np.exp(-x))
        return (float(g) * (p - y) * mask / count,)

    return _apply("masked_bce", [logits], fwd, vjp)


# ---------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] = ()) -> GradientMap:
    """Gradients of scalar ``loss`` with respect to every registered parameter.

    Intermediate tensors named in ``wrt`` keep their gradients too.
    """
    if not isinstance(loss, Tensor) or loss.tape is not tape:
        raise ContractViolation("loss handle is not recorded on this tape")
    if loss.value.size != 1:
        raise ContractViolation(f"loss must be scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    keep = {t.id for t in wrt}
    retained: dict[int, np.ndarray] = {}
    for op in reversed(tape.ops):
        g = grads.pop(op.id, None)
        if op.id in keep:
            retained[op.id] = np.zeros_like(op.output.value) if g is None else g
        if g is None:
            continue
        ins = [t.value for t in op.inputs]
        parts = op.vjp(g, *ins, op.output.value)
        for t, gi in zip(op.inputs, parts):
            if t.id < 0:
                continue
            if tape.check_finite and not np.all(np.isfinite(gi)):
                raise NumericError(f"non-finite gradient in {op.name} (op {op.id})", op_id=op.id)
            if t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = np.array(gi, dtype=DTYPE, copy=True)
    out = GradientMap()
    for t in wrt:
        if t.id not in retained:
            retained[t.id] = grads.get(t.id, np.zeros_like(t.value))
    out.retained = retained
    for name, p in tape.params.items():
        g = grads.get(p.id)
        out[name] = np.zeros_like(p.value) if g is None else g.reshape(p.value.shape)
    return out


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class FDReport:
    max_rel_error: float
    checked: int
    excluded: list[tuple[str, int]]
    worst: tuple[str, int] | None = None

    def __float__(self) -> float:
        return self.max_rel_error


def finite_difference_check(
    function: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    names: Sequence[str] | None = None,
    max_coords: int | None = None,
    seed: int = 0,
    freeze_stop_gradients: bool = True,
) -> FDReport:
    """Compare :func:`backward` against central differences.

    ``function(tape, tensors)`` builds the loss from parameter tensors. Any
    coordinate whose +-eps evaluations change a discrete decision recorded on
    the tape (argmax index, relu mask) is excluded and reported.

    With ``freeze_stop_gradients`` the perturbed passes hold every
    stop-gradient output (and the straight-through offset z_q - z) at its
    base value, so the differenced function is the surrogate whose exact
    gradient backward() computes.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")

    frozen: list[np.ndarray] | None = None

    def run(values: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray], Tape, Tensor]:
        tape = Tape(frozen=frozen)
        ts = {k: tape.param(v, k) for k, v in values.items()}
        loss = function(tape, ts)
        return float(loss.value), tape.discrete, tape, loss

    base_values = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}
    f0, disc0, tape, loss = run(base_values)
    f0b, _, _, _ = run(base_values)
    if f0 != f0b:
        raise ContractViolation("function is not deterministic: two forward passes disagree")
    analytic = backward(tape, loss)
    if freeze_stop_gradients:
        frozen = list(tape.sg_log)

    coords = [(k, i) for k in (names or list(params)) for i in range(base_values[k].size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    worst_at = None
    excluded = []
    for k, i in coords:
        vals = dict(base_values)
        arr = base_values[k].copy()
        flat = arr.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        vals[k] = arr
        fp, dp, _, _ = run(vals)
        arr2 = base_values[k].copy()
        arr2.reshape(-1)[i] = orig - eps
        vals[k] = arr2
        fm, dm, _, _ = run(vals)
        if not (_same_discrete(disc0, dp) and _same_discrete(disc0, dm)):
            excluded.append((k, i))
            continue
        num = (fp - fm) / (2 * eps)
        a = float(analytic[k].reshape(-1)[i])
        err = abs(a - num) / max(1e-8, abs(a) + abs(num))
        if err > worst:
            worst, worst_at = err, (k, i)
    return FDReport(worst, len(coords) - len(excluded), excluded, worst_at)


def _same_discrete(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> bool:
    if a.keys() != b.keys():
        return False
    return all(np.array_equal(a[k], b[k]) for k in a)
