"""Tape-based reverse-mode automatic differentiation on dense numpy arrays.

Operations on :class:`Var` objects are recorded on a :class:`Tape` in
execution order.  A recorded tape can be replayed with new leaf values
(:func:`forward_eval`) and differentiated (:func:`backward_grad`).

Every op in this module is polymorphic: called with plain arrays it simply
evaluates with numpy, so model code can be written once and used both for
training (on a tape) and for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "forward_eval",
    "backward_grad",
    "finite_diff_check",
    "value_of",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "tanh",
    "sin",
    "cos",
    "exp",
    "sum",
    "sqnorm",
    "reshape",
    "transpose",
    "concatenate",
    "broadcast_to",
    "take_rows",
    "where",
]


@dataclass(frozen=True)
class Primitive:
    forward: Callable[..., np.ndarray]
    # (adjoint, output value, input values, attrs) -> one adjoint per input
    backward: Callable[..., Sequence[np.ndarray | None]]


_PRIMITIVES: dict[str, Primitive] = {}


def _primitive(name: str, forward, backward) -> None:
    _PRIMITIVES[name] = Primitive(forward, backward)


class Var:
    """A tensor value recorded on a tape."""

    __slots__ = ("value", "tape", "index", "op", "parents", "attrs", "name", "requires_grad")
    __array_priority__ = 1000

    def __init__(self, tape, value, op=None, parents=(), attrs=None, name=None, requires_grad=False):
        self.value = value
        self.tape = tape
        self.op = op
        self.parents = parents
        self.attrs = attrs or {}
        self.name = name
        self.requires_grad = requires_grad
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> Var:
        return transpose(self)

    def __repr__(self) -> str:
        label = self.name or self.op or "const"
        return f"Var({label}, shape={self.shape})"

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _record("getitem", (self,), {"index": index})

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as they are computed, so the list is always in
    topological order.  ``diverged`` is set by :func:`forward_eval` when the
    root value is not finite.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Var] = []
        self.diverged = False
        self.adjoints: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def param(self, name: str, value) -> Var:
        """Leaf that gradients are taken with respect to."""
        return Var(self, np.asarray(value, dtype=self.dtype), name=name, requires_grad=True)

    def input(self, name: str, value) -> Var:
        """Named leaf that can be replaced when the tape is replayed."""
        return Var(self, np.asarray(value, dtype=self.dtype), name=name)

    def const(self, value) -> Var:
        return Var(self, np.asarray(value, dtype=self.dtype))

    def params(self) -> dict[str, Var]:
        return {v.name: v for v in self.nodes if v.requires_grad}

    @property
    def root(self) -> Var:
        return self.nodes[-1]

    def release(self) -> None:
        """Drop recorded nodes and adjoints.

        Vars and their tape reference each other, so without this the cycle
        collector decides when large intermediate arrays are freed.
        """
        self.nodes.clear()
        self.adjoints.clear()


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _find_tape(args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("cannot mix Vars from different tapes")
        return x
    return tape.const(x)


def _record(op: str, args, attrs=None):
    attrs = attrs or {}
    tape = _find_tape(args)
    prim = _PRIMITIVES[op]
    if tape is None:
        return prim.forward(*args, **attrs)
    parents = tuple(_lift(tape, a) for a in args)
    value = prim.forward(*(p.value for p in parents), **attrs)
    return Var(tape, value, op=op, parents=parents, attrs=attrs)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives ---------------------------------------------------------------

_primitive(
    "add",
    lambda a, b: a + b,
    lambda g, out, ins, at: (_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)),
)
_primitive(
    "sub",
    lambda a, b: a - b,
    lambda g, out, ins, at: (_unbroadcast(g, ins[0].shape), _unbroadcast(-g, ins[1].shape)),
)
_primitive(
    "mul",
    lambda a, b: a * b,
    lambda g, out, ins, at: (
        _unbroadcast(g * ins[1], ins[0].shape),
        _unbroadcast(g * ins[0], ins[1].shape),
    ),
)
_primitive(
    "div",
    lambda a, b: a / b,
    lambda g, out, ins, at: (
        _unbroadcast(g / ins[1], ins[0].shape),
        _unbroadcast(-g * out / ins[1], ins[1].shape),
    ),
)
_primitive("neg", lambda a: -a, lambda g, out, ins, at: (-g,))
_primitive(
    "power",
    lambda a, p: a**p,
    lambda g, out, ins, at: (g * at["p"] * ins[0] ** (at["p"] - 1),),
)
_primitive("tanh", np.tanh, lambda g, out, ins, at: (g * (1.0 - out * out),))
_primitive("sin", np.sin, lambda g, out, ins, at: (g * np.cos(ins[0]),))
_primitive("cos", np.cos, lambda g, out, ins, at: (-g * np.sin(ins[0]),))
_primitive("exp", np.exp, lambda g, out, ins, at: (g * out,))


def _matmul_backward(g, out, ins, at):
    a, b = ins
    if a.ndim == 1 or b.ndim == 1:
        raise ValueError("matmul on tape requires operands with ndim >= 2")
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


_primitive("matmul", np.matmul, _matmul_backward)


def _sum_backward(g, out, ins, at):
    axis, keepdims = at["axis"], at["keepdims"]
    shape = ins[0].shape
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape),)


_primitive(
    "sum",
    lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
    _sum_backward,
)


def _sqnorm_backward(g, out, ins, at):
    axis = at["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (2.0 * g * ins[0],)


_primitive(
    "sqnorm",
    lambda a, axis=None: np.sum(a * a, axis=axis),
    _sqnorm_backward,
)
_primitive(
    "reshape",
    lambda a, shape: np.reshape(a, shape),
    lambda g, out, ins, at: (np.reshape(g, ins[0].shape),),
)


def _transpose_backward(g, out, ins, at):
    axes = at["axes"]
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


_primitive("transpose", lambda a, axes=None: np.transpose(a, axes), _transpose_backward)
_primitive(
    "broadcast_to",
    lambda a, shape: np.broadcast_to(a, shape),
    lambda g, out, ins, at: (_unbroadcast(g, ins[0].shape),),
)


def _getitem_backward(g, out, ins, at):
    full = np.zeros_like(ins[0])
    np.add.at(full, at["index"], g)
    return (full,)


_primitive("getitem", lambda a, index: a[index], _getitem_backward)


def _concat_backward(g, out, ins, at):
    axis = at["axis"]
    cuts = np.cumsum([x.shape[axis] for x in ins])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


_primitive(
    "concatenate",
    lambda *xs, axis=0: np.concatenate(xs, axis=axis),
    _concat_backward,
)
_primitive(
    "where",
    lambda a, b, mask: np.where(mask, a, b),
    lambda g, out, ins, at: (
        _unbroadcast(np.where(at["mask"], g, 0.0), ins[0].shape),
        _unbroadcast(np.where(at["mask"], 0.0, g), ins[1].shape),
    ),
)


# -- public op wrappers -------------------------------------------------------


def add(a, b):
    return _record("add", (a, b))


def sub(a, b):
    return _record("sub", (a, b))


def mul(a, b):
    return _record("mul", (a, b))


def div(a, b):
    return _record("div", (a, b))


def neg(a):
    return _record("neg", (a,))


def power(a, p: float):
    return _record("power", (a,), {"p": p})


def matmul(a, b):
    return _record("matmul", (a, b))


def tanh(a):
    return _record("tanh", (a,))


def sin(a):
    return _record("sin", (a,))


def cos(a):
    return _record("cos", (a,))


def exp(a):
    return _record("exp", (a,))


def sum(a, axis=None, keepdims=False):
    return _record("sum", (a,), {"axis": axis, "keepdims": keepdims})


def sqnorm(a, axis=None):
    """Sum of squares over ``axis`` (all axes when None)."""
    if isinstance(axis, list):
        axis = tuple(axis)
    return _record("sqnorm", (a,), {"axis": axis})


def reshape(a, shape):
    return _record("reshape", (a,), {"shape": tuple(shape)})


def transpose(a, axes=None):
    return _record("transpose", (a,), {"axes": None if axes is None else tuple(axes)})


def broadcast_to(a, shape):
    return _record("broadcast_to", (a,), {"shape": tuple(shape)})


def take_rows(a, rows):
    """Select leading-axis entries ``rows`` (integer index array)."""
    return _record("getitem", (a,), {"index": np.asarray(rows)})


def concatenate(xs, axis=0):
    return _record("concatenate", tuple(xs), {"axis": axis})


def where(mask, a, b):
    """Elementwise select; ``mask`` is a constant boolean array."""
    return _record("where", (a, b), {"mask": np.asarray(mask, dtype=bool)})


# -- tape evaluation ----------------------------------------------------------


def forward_eval(tape: Tape, inputs: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """Replay ``tape`` with new values for named leaves and return the root value.

    Unnamed constants keep their recorded values.  Sets ``tape.diverged``
    when the root contains NaN or Inf.
    """
    inputs = dict(inputs or {})
    known = {v.name for v in tape.nodes if v.name is not None}
    unknown = set(inputs) - known
    if unknown:
        raise KeyError(f"no leaf named {sorted(unknown)} on tape")
    with np.errstate(all="ignore"):
        for node in tape.nodes:
            if node.op is None:
                if node.name in inputs:
                    new = np.asarray(inputs[node.name], dtype=tape.dtype)
                    if new.shape != node.value.shape:
                        raise ValueError(
                            f"input {node.name!r}: expected shape {node.value.shape}, got {new.shape}"
                        )
                    node.value = new
                continue
            prim = _PRIMITIVES[node.op]
            node.value = prim.forward(*(p.value for p in node.parents), **node.attrs)
    root = tape.root.value
    tape.diverged = not bool(np.all(np.isfinite(root)))
    return root


def backward_grad(tape: Tape, root: Var | None = None) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``root``; returns adjoints of all parameters."""
    root = tape.root if root is None else root
    if root.value.size != 1:
        raise ValueError(f"root must be scalar, got shape {root.value.shape}")
    adj: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
    with np.errstate(all="ignore"):
        for node in reversed(tape.nodes[: root.index + 1]):
            g = adj.get(node.index)
            if g is None or node.op is None:
                continue
            prim = _PRIMITIVES[node.op]
            ins = [p.value for p in node.parents]
            grads = prim.backward(g, node.value, ins, node.attrs)
            for parent, pg in zip(node.parents, grads):
                if pg is None:
                    continue
                if parent.index in adj:
                    adj[parent.index] = adj[parent.index] + pg
                else:
                    adj[parent.index] = pg
    tape.adjoints = adj
    return {
        node.name: np.array(adj.get(node.index, np.zeros_like(node.value)))
        for node in tape.nodes
        if node.requires_grad
    }


def finite_diff_check(
    tape: Tape,
    inputs: Mapping[str, np.ndarray] | None = None,
    eps: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative deviation between AD gradients and central differences.

    The relative error of each entry is ``|ad - cd| / (|cd| + eps)`` where
    ``eps`` is also the difference step.  ``max_entries`` caps the number of
    probed entries per parameter (chosen at random with ``seed``).
    """
    if tape.dtype != np.float64:
        raise ValueError("finite-difference checks need a float64 tape")
    forward_eval(tape, inputs)
    grads = backward_grad(tape)
    params = tape.params()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, var in params.items():
        base = var.value.copy()
        flat_ids = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat_ids = rng.choice(base.size, size=max_entries, replace=False)
        for k in flat_ids:
            idx = np.unravel_index(k, base.shape)
            bumped = base.copy()
            bumped[idx] += eps
            var.value = bumped
            up = float(forward_eval(tape, inputs))
            bumped[idx] = base[idx] - eps
            var.value = bumped
            down = float(forward_eval(tape, inputs))
            cd = (up - down) / (2.0 * eps)
            ad = float(grads[name][idx])
            worst = max(worst, abs(ad - cd) / (abs(cd) + eps))
        var.value = base
    forward_eval(tape, inputs)
    return worst
