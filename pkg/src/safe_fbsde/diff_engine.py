"""Reverse-mode differentiation on an explicit operation tape.

Every differentiable quantity in a rollout is a :class:`Var` holding a
float64 numpy array. While a :class:`Tape` is active, arithmetic on Vars
records one node per primitive operation; :func:`backprop` walks the tape
in reverse and accumulates gradients into every leaf. Functions written
against the dispatch helpers below (``sin``, ``stack``, ...) run unchanged
on plain numpy arrays when no tape is active, which is how evaluation-mode
rollouts avoid tracking overhead.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Var",
    "Tape",
    "GradientSet",
    "backprop",
    "finite_difference_check",
    "FdReport",
    "record_custom",
    "value_of",
    "sin",
    "cos",
    "tanh",
    "sigmoid",
    "exp",
    "sqrt",
    "square",
    "wrap_angle",
    "stack",
    "concat",
    "vsum",
    "vmean",
    "broadcast_rows",
]

# Dict of leaf name -> gradient buffer, mirroring the trainable parameters.
GradientSet = dict


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of the primitive operations of one computation.

    Nodes are appended in execution order, which is a valid topological
    order for the reverse sweep. Use as a context manager::

        with Tape() as tape:
            loss = model(params)
        grads = backprop(tape, loss)
    """

    def __init__(self) -> None:
        self.nodes: list[Var] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Var:
    """A float64 array tracked for reverse-mode differentiation."""

    __slots__ = ("value", "grad", "parents", "backward", "op", "name", "index")

    # Make ndarray <op> Var defer to the reflected Var operators instead of
    # numpy building an object array elementwise.
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, value, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Var, ...] = ()
        self.backward: Callable | None = None
        self.op = "leaf"
        self.name = name
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = self.name if self.name else self.op
        return f"Var({tag}, shape={self.value.shape})"

    # -- operator overloads --------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(other, self)

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _sub(other, self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(other, self)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("Var exponent must be a constant")
        return _pow_const(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return _getitem(self, key)


def value_of(x):
    """Underlying ndarray of `x`, whether it is a Var or already an array."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _is_var(x) -> bool:
    return isinstance(x, Var)


def record_custom(value, parents: Sequence, backward: Callable, op: str) -> "Var | np.ndarray":
    """Record a custom primitive (e.g. a QP solve) on the active tape.

    `backward(upstream)` must return one gradient per entry of `parents`
    (None for non-Var parents). Without an active tape, or when no parent
    is a Var, the raw `value` is returned untracked.
    """
    tape = _active_tape()
    if tape is None or not any(_is_var(p) for p in parents):
        return np.asarray(value, dtype=np.float64)
    out = Var(value)
    out.parents = tuple(p for p in parents if _is_var(p))
    var_slots = [i for i, p in enumerate(parents) if _is_var(p)]

    def bw(g, _backward=backward, _slots=var_slots, _n=len(parents)):
        full = _backward(g)
        return tuple(full[i] for i in _slots)

    out.backward = bw
    out.op = op
    out.index = len(tape.nodes)
    tape.nodes.append(out)
    return out


def _record(value, parents, backward, op):
    """Record a node whose backward already matches the Var parents only."""
    tape = _active_tape()
    var_parents = tuple(p for p in parents if _is_var(p))
    if tape is None or not var_parents:
        return np.asarray(value, dtype=np.float64)
    out = Var(value)
    out.parents = var_parents
    out.backward = backward
    out.op = op
    out.index = len(tape.nodes)
    tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------


def _add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv

    def bw(g):
        res = []
        if _is_var(a):
            res.append(_unbroadcast(g, av.shape))
        if _is_var(b):
            res.append(_unbroadcast(g, bv.shape))
        return tuple(res)

    return _record(out, (a, b), bw, "add")


def _sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv

    def bw(g):
        res = []
        if _is_var(a):
            res.append(_unbroadcast(g, av.shape))
        if _is_var(b):
            res.append(_unbroadcast(-g, bv.shape))
        return tuple(res)

    return _record(out, (a, b), bw, "sub")


def _mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv

    def bw(g):
        res = []
        if _is_var(a):
            res.append(_unbroadcast(g * bv, av.shape))
        if _is_var(b):
            res.append(_unbroadcast(g * av, bv.shape))
        return tuple(res)

    return _record(out, (a, b), bw, "mul")


def _div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv

    def bw(g):
        res = []
        if _is_var(a):
            res.append(_unbroadcast(g / bv, av.shape))
        if _is_var(b):
            res.append(_unbroadcast(-g * av / (bv * bv), bv.shape))
        return tuple(res)

    return _record(out, (a, b), bw, "div")


def _neg(a):
    return _record(-a.value, (a,), lambda g: (-g,), "neg")


def _pow_const(a, p: float):
    av = value_of(a)
    out = av**p

    def bw(g):
        return (g * p * av ** (p - 1.0),)

    return _record(out, (a,), bw, "pow")


def square(x):
    xv = value_of(x)
    if not _is_var(x):
        return xv * xv
    return _record(xv * xv, (x,), lambda g: (2.0 * g * xv,), "square")


def sin(x):
    xv = value_of(x)
    if not _is_var(x):
        return np.sin(xv)
    return _record(np.sin(xv), (x,), lambda g: (g * np.cos(xv),), "sin")


def cos(x):
    xv = value_of(x)
    if not _is_var(x):
        return np.cos(xv)
    return _record(np.cos(xv), (x,), lambda g: (-g * np.sin(xv),), "cos")


def exp(x):
    xv = value_of(x)
    out = np.exp(xv)
    if not _is_var(x):
        return out
    return _record(out, (x,), lambda g: (g * out,), "exp")


def sqrt(x):
    xv = value_of(x)
    out = np.sqrt(xv)
    if not _is_var(x):
        return out
    return _record(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(x):
    xv = value_of(x)
    out = np.tanh(xv)
    if not _is_var(x):
        return out
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_values(x):
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    xv = np.asarray(value_of(x))
    out = _sigmoid_values(xv)
    if not _is_var(x):
        return out
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def wrap_angle(x):
    """Wrap to (-pi, pi]. Piecewise constant shift: gradient passes through."""
    xv = value_of(x)
    out = xv - 2.0 * np.pi * np.round(xv / (2.0 * np.pi))
    if not _is_var(x):
        return out
    return _record(out, (x,), lambda g: (g,), "wrap_angle")


# -- shape & reduction ---------------------------------------------------


def _getitem(a, key):
    av = a.value
    out = av[key]

    def bw(g):
        buf = np.zeros_like(av)
        buf[key] += g
        return (buf,)

    return _record(out, (a,), bw, "getitem")


def stack(parts: Sequence, axis: int = 0):
    vals = [value_of(p) for p in parts]
    out = np.stack(vals, axis=axis)
    if not any(_is_var(p) for p in parts):
        return out

    def bw(g):
        res = []
        for i, p in enumerate(parts):
            if _is_var(p):
                res.append(np.take(g, i, axis=axis))
        return tuple(res)

    return _record(out, tuple(parts), bw, "stack")


def concat(parts: Sequence, axis: int = -1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not any(_is_var(p) for p in parts):
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        res = []
        for i, p in enumerate(parts):
            if _is_var(p):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                res.append(g[tuple(sl)])
        return tuple(res)

    return _record(out, tuple(parts), bw, "concat")


def vsum(x, axis=None):
    xv = value_of(x)
    out = xv.sum(axis=axis)
    if not _is_var(x):
        return out

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    return _record(out, (x,), bw, "sum")


def vmean(x, axis=None):
    xv = value_of(x)
    out = xv.mean(axis=axis)
    if not _is_var(x):
        return out
    n = xv.size if axis is None else xv.shape[axis]

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), xv.shape).copy(),)

    return _record(out, (x,), bw, "mean")


def broadcast_rows(v, m: int):
    """Tile a (k,) vector (or scalar) into m batch rows; backward sums rows."""
    vv = value_of(v)
    out = np.broadcast_to(vv, (m,) + vv.shape).copy()
    if not _is_var(v):
        return out
    return _record(out, (v,), lambda g: (g.sum(axis=0),), "broadcast_rows")


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {av.shape} @ {bv.shape}")
    out = av @ bv

    def bw(g):
        res = []
        if _is_var(a):
            res.append(g @ bv.T)
        if _is_var(b):
            res.append(av.T @ g)
        return tuple(res)

    return _record(out, (a, b), bw, "matmul")


# -- reverse sweep --------------------------------------------------------


def backprop(tape: Tape, loss: Var, check_finite: bool = True) -> GradientSet:
    """Accumulate d(loss)/d(leaf) for every Var reachable from `loss`.

    Returns a GradientSet mapping each *named* leaf to its gradient buffer;
    all intermediate Vars also end up with their `.grad` field set. Raises
    FloatingPointError naming the offending tape node if a non-finite
    gradient appears.
    """
    if not isinstance(loss, Var):
        raise TypeError("loss is not a tracked Var; was a Tape active?")
    if loss.value.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    loss.grad = np.ones(())
    for node in reversed(tape.nodes):
        if node.grad is None or node.backward is None:
            continue
        grads = node.backward(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None:
                continue
            if check_finite and not np.all(np.isfinite(g)):
                raise FloatingPointError(
                    f"non-finite gradient out of tape node {node.index} ({node.op})"
                )
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g
    out: GradientSet = {}
    for node in tape.nodes:
        for p in node.parents:
            if p.name is not None and p.grad is not None:
                out[p.name] = p.grad
    if loss.name is not None and loss.grad is not None:
        out[loss.name] = loss.grad
    return out


class FdReport:
    """Result of comparing analytic gradients against central differences."""

    def __init__(self, per_param: dict, epsilon: float, floor: float):
        self.per_param = per_param  # name -> (max_rel_err, worst_flat_index)
        self.epsilon = epsilon
        self.floor = floor

    @property
    def max_rel_err(self) -> float:
        if not self.per_param:
            return 0.0
        return max(v[0] for v in self.per_param.values())

    def worst(self):
        name = max(self.per_param, key=lambda k: self.per_param[k][0])
        return name, self.per_param[name]

    def __repr__(self):
        return f"FdReport(max_rel_err={self.max_rel_err:.3e}, params={len(self.per_param)})"


def finite_difference_check(
    computation: Callable,
    params: dict,
    epsilon: float = 1e-5,
    floor: float = 1e-6,
    coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> FdReport:
    """Compare tape gradients of `computation` against central differences.

    `computation(params)` must return a scalar and must be pure: any noise
    it consumes has to be regenerated from a fixed seed inside, so the same
    random numbers are common to all perturbed evaluations. It receives a
    dict of arrays or Vars and must be written against the dispatch helpers
    in this module.

    `coords_per_param` limits the check to that many randomly chosen
    coordinates of each parameter (all coordinates when None).
    """
    leaves = {k: Var(np.array(v, dtype=np.float64, copy=True), name=k) for k, v in params.items()}
    with Tape() as tape:
        loss = computation(leaves)
    analytic = backprop(tape, loss)

    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    per_param = {}
    for name, p in base.items():
        flat = p.reshape(-1)
        n = flat.size
        if coords_per_param is not None and coords_per_param < n:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(n, size=coords_per_param, replace=False)
        else:
            idx = np.arange(n)
        a = analytic.get(name, np.zeros_like(p)).reshape(-1)
        worst = (0.0, -1)
        for i in idx:
            h = epsilon * max(1.0, abs(flat[i]))
            old = flat[i]
            flat[i] = old + h
            f_plus = float(value_of(computation(base)))
            flat[i] = old - h
            f_minus = float(value_of(computation(base)))
            flat[i] = old
            fd = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(a[i]), abs(fd), floor)
            rel = abs(a[i] - fd) / denom
            if rel > worst[0]:
                worst = (rel, int(i))
        per_param[name] = worst
    return FdReport(per_param, epsilon, floor)
