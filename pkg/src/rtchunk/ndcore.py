"""Minimal tape-based reverse-mode autodiff over float64 numpy arrays.

Values are wrapped in :class:`Tensor`. Operations on tensors that belong to a
:class:`Tape` are recorded; operations on untaped tensors run eagerly with no
bookkeeping, so the same model code serves inference and differentiation.

The primitive set is closed: ``add, mul, matmul, affine, act, sum, where``
plus the structural ``reshape`` and ``concat``. Broadcasting is only allowed
over leading (batch) axes: the smaller operand's shape must be a suffix of the
larger one's.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np


class StructuralError(TypeError):
    """Unsupported primitive, shape mismatch or untraced output."""


class NumericError(FloatingPointError):
    """A primitive produced a non-finite value."""


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _suffix_broadcast(a: tuple, b: tuple) -> tuple:
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if big[len(big) - len(small):] != small:
        raise StructuralError(f"shapes {a} and {b} differ beyond leading batch axes")
    return big


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# --- primitives -------------------------------------------------------------
# Each primitive is (forward(*arrays, **attrs), backward(g, arrays, out, **attrs)).


def _add_fwd(a, b):
    _suffix_broadcast(a.shape, b.shape)
    return a + b


def _add_bwd(g, ins, out):
    a, b = ins
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _mul_fwd(a, b):
    _suffix_broadcast(a.shape, b.shape)
    return a * b


def _mul_bwd(g, ins, out):
    a, b = ins
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise StructuralError(f"matmul shapes {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2:
        raise StructuralError("matmul: only one operand may carry batch axes")
    if b.ndim == 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],))
    return a @ b


def _matmul_bwd(g, ins, out):
    a, b = ins
    if b.ndim == 2:
        ga = (g.reshape(-1, g.shape[-1]) @ b.T).reshape(a.shape)
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gt = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
        bt = np.moveaxis(b, -2, 0).reshape(b.shape[-2], -1)
        ga = gt @ bt.T
        gb = a.T @ g
    return ga, gb


def _affine_fwd(x, w, b):
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise StructuralError(f"affine shapes x{x.shape} w{w.shape} b{b.shape}")
    out = x.reshape(-1, x.shape[-1]) @ w
    out += b
    return out.reshape(x.shape[:-1] + (w.shape[1],))


def _affine_bwd(g, ins, out):
    x, w, b = ins
    g2 = g.reshape(-1, g.shape[-1])
    gx = (g2 @ w.T).reshape(x.shape)
    return gx, x.reshape(-1, x.shape[-1]).T @ g2, g2.sum(axis=0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


_ACTS: dict[str, tuple[Callable, Callable]] = {
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "silu": (_silu, lambda x, y: _silu_grad(x)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "sin": (np.sin, lambda x, y: np.cos(x)),
}


def _act_fwd(x, *, kind):
    if kind not in _ACTS:
        raise StructuralError(f"unsupported nonlinearity {kind!r}")
    return _ACTS[kind][0](x)


def _act_bwd(g, ins, out, *, kind):
    return (g * _ACTS[kind][1](ins[0], out),)


def _sum_fwd(x, *, axis):
    return np.asarray(np.sum(x, axis=axis), dtype=np.float64)


def _sum_bwd(g, ins, out, *, axis):
    (x,) = ins
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _where_fwd(a, b, *, mask):
    if a.shape != b.shape or mask.shape != a.shape[: mask.ndim]:
        raise StructuralError(f"where shapes {mask.shape}, {a.shape}, {b.shape}")
    m = mask.reshape(mask.shape + (1,) * (a.ndim - mask.ndim))
    return np.where(m, a, b)


def _where_bwd(g, ins, out, *, mask):
    m = mask.reshape(mask.shape + (1,) * (g.ndim - mask.ndim))
    zero = np.zeros_like(g)
    return np.where(m, g, zero), np.where(m, zero, g)


def _reshape_fwd(x, *, shape):
    return x.reshape(shape)


def _reshape_bwd(g, ins, out):
    return (g.reshape(ins[0].shape),)


def _concat_fwd(*xs, axis):
    return np.concatenate(xs, axis=axis)


def _concat_bwd(g, ins, out, *, axis):
    cuts = np.cumsum([x.shape[axis] for x in ins])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "affine": (_affine_fwd, _affine_bwd),
    "act": (_act_fwd, _act_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "where": (_where_fwd, _where_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "concat": (_concat_fwd, _concat_bwd),
}

# attrs that are needed by backward; everything else is forward-only.
_BWD_ATTRS = {"act": ("kind",), "sum": ("axis",), "where": ("mask",), "concat": ("axis",)}


@dataclass
class Op:
    name: str
    inputs: tuple  # ints (tape slots) or np.ndarray constants
    attrs: dict
    output: int


class Tape:
    """Ordered record of primitive applications.

    Slot ``i`` of ``values`` holds the i-th traced array; leaves are slots that
    no op produced.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.ops: list[Op] = []
        self.leaves: list[int] = []
        self.last_backward_order: list[int] = []

    def leaf(self, x) -> "Tensor":
        arr = np.array(_as_array(x), dtype=np.float64)
        arr.flags.writeable = False
        self.values.append(arr)
        slot = len(self.values) - 1
        self.leaves.append(slot)
        return Tensor(arr, self, slot)

    def _record(self, name, args, attrs, out) -> "Tensor":
        out.flags.writeable = False
        self.values.append(out)
        slot = len(self.values) - 1
        refs = tuple(a.index if isinstance(a, Tensor) and a.tape is self else _as_array(a) for a in args)
        self.ops.append(Op(name, refs, attrs, slot))
        return Tensor(out, self, slot)

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every slot from the leaves. Returns the full value list."""
        vals: list[Any] = [None] * len(self.values)
        for slot in self.leaves:
            vals[slot] = self.values[slot] if leaf_values is None or slot not in leaf_values else leaf_values[slot]
        for op in self.ops:
            ins = [vals[r] if isinstance(r, int) else r for r in op.inputs]
            vals[op.output] = PRIMITIVES[op.name][0](*ins, **op.attrs)
        return vals

    def backward(self, output: "Tensor", cotangent) -> list[np.ndarray | None]:
        if output.tape is not self:
            raise StructuralError("output was not produced on this tape")
        cot = _as_array(cotangent)
        if cot.shape != output.shape:
            raise StructuralError(f"cotangent shape {cot.shape} != output shape {output.shape}")
        adj: list[np.ndarray | None] = [None] * len(self.values)
        adj[output.index] = cot
        order = []
        for k in range(len(self.ops) - 1, -1, -1):
            op = self.ops[k]
            g = adj[op.output]
            if g is None:
                continue
            order.append(k)
            ins = [self.values[r] if isinstance(r, int) else r for r in op.inputs]
            battrs = {a: op.attrs[a] for a in _BWD_ATTRS.get(op.name, ())}
            grads = PRIMITIVES[op.name][1](g, ins, self.values[op.output], **battrs)
            for r, gi in zip(op.inputs, grads):
                if isinstance(r, int):
                    adj[r] = gi if adj[r] is None else adj[r] + gi
        self.last_backward_order = order
        return adj


def _apply(name: str, *args, **attrs) -> "Tensor":
    tape = next((a.tape for a in args if isinstance(a, Tensor) and a.tape is not None), None)
    for a in args:
        if isinstance(a, Tensor) and a.tape is not None and a.tape is not tape:
            raise StructuralError("operands live on different tapes")
    arrays = [_as_array(a) for a in args]
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.asarray(PRIMITIVES[name][0](*arrays, **attrs), dtype=np.float64)
    if not np.isfinite(out).all():
        where = f"op #{len(tape.ops)}" if tape is not None else "untaped op"
        raise NumericError(f"non-finite value produced by {where} ({name})")
    if tape is None:
        return Tensor(out)
    return tape._record(name, args, attrs, out)


class Tensor:
    """Immutable float64 array, optionally tracked by a tape."""

    __slots__ = ("data", "tape", "index")
    __array_ufunc__ = None  # numpy ufuncs on tensors are not primitives

    def __init__(self, data, tape: Tape | None = None, index: int = -1):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.array(data, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __array__(self, *args, **kwargs):
        raise StructuralError("Tensor cannot be converted implicitly; use .data")

    def __repr__(self):
        tag = f", slot={self.index}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return _apply("add", self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return _apply("mul", self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return _apply("mul", self, -1.0)

    def __sub__(self, other):
        return _apply("add", self, -other if isinstance(other, Tensor) else -_as_array(other))

    def __rsub__(self, other):
        return _apply("add", -self, other)

    def __matmul__(self, other):
        return _apply("matmul", self, other)

    def __rmatmul__(self, other):
        return _apply("matmul", other, self)

    def sum(self, axis=None):
        return _apply("sum", self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return _apply("reshape", self, shape=tuple(shape))


def add(a, b):
    return _apply("add", a, b)


def mul(a, b):
    return _apply("mul", a, b)


def matmul(a, b):
    return _apply("matmul", a, b)


def affine(x, w, b):
    return _apply("affine", x, w, b)


def act(x, kind: str):
    return _apply("act", x, kind=kind)


def tanh(x):
    return act(x, "tanh")


def silu(x):
    return act(x, "silu")


def reduce_sum(x, axis=None):
    return _apply("sum", x, axis=axis)


def where(mask, a, b):
    """Elementwise select; `mask` is a constant boolean array over leading axes of `a`."""
    return _apply("where", a, b, mask=np.asarray(mask, dtype=bool))


def reshape(x, shape):
    return _apply("reshape", x, shape=tuple(shape))


def concat(xs, axis=-1):
    return _apply("concat", *xs, axis=axis)


def constant(x) -> Tensor:
    return Tensor(np.array(_as_array(x), dtype=np.float64))


# --- transforms ---------------------------------------------------------------


def _trace(f, x, tape: Tape):
    if isinstance(x, dict):
        leaves = {k: tape.leaf(v) for k, v in x.items()}
    else:
        leaves = tape.leaf(x)
    try:
        out = f(leaves)
    except TypeError as exc:
        raise StructuralError(f"function uses an unsupported operation: {exc}") from exc
    if not isinstance(out, Tensor) or out.tape is not tape:
        raise StructuralError("function output is not a traced Tensor")
    return leaves, out


def _collect(leaves, adj):
    def one(t: Tensor):
        g = adj[t.index]
        return np.zeros(t.shape) if g is None else g

    if isinstance(leaves, dict):
        return {k: one(t) for k, t in leaves.items()}
    return one(leaves)


def value_and_grad(f: Callable, x):
    """Return ``(f(x), df/dx)``; `x` may be an array or a dict of arrays."""
    tape = Tape()
    leaves, out = _trace(f, x, tape)
    if out.data.size != 1:
        raise StructuralError(f"grad needs a scalar output, got shape {out.shape}")
    adj = tape.backward(out, np.ones(out.shape))
    return float(out.data.reshape(())), _collect(leaves, adj)


def grad(f: Callable, x):
    return value_and_grad(f, x)[1]


def vjp(g: Callable, x, cotangent):
    """cotangent^T . dg/dx, shaped like `x`."""
    tape = Tape()
    leaves, out = _trace(g, x, tape)
    adj = tape.backward(out, cotangent)
    return _collect(leaves, adj)


def value_and_vjp(g: Callable, x, cotangent_fn: Callable[[np.ndarray], np.ndarray]):
    """Evaluate g once, build the cotangent from its value, and pull it back.

    Returns ``(g(x), vjp)``. Used where the cotangent depends on the primal
    output (guided sampling).
    """
    tape = Tape()
    leaves, out = _trace(g, x, tape)
    adj = tape.backward(out, cotangent_fn(out.data))
    return out.data, _collect(leaves, adj)
