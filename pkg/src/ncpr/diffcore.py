"""Minimal reverse-mode automatic differentiation on a dense-array tape.

A :class:`Tape` records every elementary operation together with a closure
computing its vector-Jacobian product. Values are float64 numpy arrays
(vectors and matrices) or Python floats (scalars). Forward values are computed
eagerly; :meth:`Tape.backward` sweeps the tape once in reverse.

Every op accepts plain numbers / arrays as well as :class:`Var` arguments.
When no argument lives on a tape the op evaluates directly with numpy and
returns a plain value, so the same model code runs on and off the tape.

    >>> tape = Tape()
    >>> x = tape.var(3.0)
    >>> y = x * x
    >>> tape.backward(y)[x]
    6.0
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "GradMap",
    "ShapeError",
    "OPCODES",
    "record_elementary",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matvec",
    "matmul",
    "dot",
    "tanh",
    "sin",
    "cos",
    "square",
    "absolute",
    "total",
    "scale",
    "clamp",
    "take",
    "stack",
    "reshape",
    "row",
    "value_of",
    "grad_check",
    "numeric_grad",
]


class ShapeError(ValueError):
    """Arguments of an elementary op have non-conforming shapes."""


def _shape(x) -> tuple:
    if type(x) is Var:
        return x.shape
    if type(x) is float:
        return ()
    return np.shape(x)


def _as_value(x):
    if isinstance(x, (int, float)):
        return float(x)
    if isinstance(x, np.ndarray):
        if x.ndim == 0:
            return float(x)
        return x if x.dtype == np.float64 else x.astype(np.float64)
    if isinstance(x, np.floating):
        return float(x)
    arr = np.asarray(x, dtype=np.float64)
    return float(arr) if arr.ndim == 0 else arr


class Tape:
    """Append-only record of operations.

    Node ``i`` stores its value, its opcode, the indices of its parents (all
    strictly smaller than ``i``) and a VJP closure mapping the output cotangent
    to one cotangent per parent. Nodes that do not depend on any
    gradient-requiring leaf carry no closure and are skipped in backward.
    """

    def __init__(self) -> None:
        self.values: list = []
        self.opcodes: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []
        self.requires: list[bool] = []
        self.params: list[int] = []
        self.last_visits = 0

    def __len__(self) -> int:
        return len(self.values)

    def _push(self, opcode, value, parents, vjp, shape) -> Var:
        idx = len(self.values)
        self.values.append(value)
        self.opcodes.append(opcode)
        self.parents.append(parents)
        self.vjps.append(vjp)
        self.requires.append(vjp is not None or opcode == "param")
        v = Var.__new__(Var)
        v.tape, v.index, v.shape = self, idx, shape
        return v

    def var(self, value) -> Var:
        """Leaf that receives a gradient (a parameter)."""
        value = _as_value(value)
        v = self._push("param", value, (), None, np.shape(value))
        self.params.append(v.index)
        return v

    param = var

    def const(self, value) -> Var:
        """Leaf that never receives a gradient."""
        value = _as_value(value)
        return self._push("const", value, (), None, np.shape(value))

    def record(self, opcode: str, value, args: Sequence, vjp: Callable, shape) -> Var:
        """Push a node whose parents are the tape-resident entries of ``args``.

        ``vjp(g)`` must return one cotangent per entry of ``args`` (``None``
        allowed for constants); only entries belonging to this tape and
        requiring gradients are kept as parents.
        """
        requires = self.requires
        live = []
        for i, a in enumerate(args):
            if type(a) is Var:
                if a.tape is not self:
                    raise ValueError(f"{opcode}: argument belongs to a different tape")
                if requires[a.index]:
                    live.append(i)
        if not live:
            return self._push(opcode, value, (), None, shape)
        parents = tuple(args[i].index for i in live)
        if len(live) == len(args):
            fn = vjp
        else:
            def fn(g, _vjp=vjp, _live=live):
                out = _vjp(g)
                return tuple(out[i] for i in _live)
        return self._push(opcode, value, parents, fn, shape)

    def backward(self, loss: Var) -> GradMap:
        """Reverse sweep from a scalar ``loss``; returns node index -> gradient."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ValueError("backward: loss must be a Var recorded on this tape")
        if loss.shape != ():
            raise ShapeError(f"backward: seed must be scalar, got shape {loss.shape}")
        top = loss.index
        grads: list = [None] * (top + 1)
        grads[top] = 1.0
        vjps, parents = self.vjps, self.parents
        visits = 0
        for i in range(top, -1, -1):
            visits += 1
            g = grads[i]
            if g is None:
                continue
            fn = vjps[i]
            if fn is None:
                continue
            for p, gp in zip(parents[i], fn(g)):
                if gp is None:
                    continue
                prev = grads[p]
                grads[p] = gp if prev is None else prev + gp
        self.last_visits = visits
        out = GradMap(self)
        for i in self.params:
            if i <= top:
                g = grads[i]
                out[i] = np.zeros_like(self.values[i]) if g is None else g
        for i, g in enumerate(grads):
            if g is not None and i not in out:
                out[i] = g
        return out


class GradMap(dict):
    """Gradients keyed by node index; also indexable by :class:`Var`.

    Parameters absent from the loss' dependency cone map to zeros.
    """

    def __init__(self, tape: Tape) -> None:
        super().__init__()
        self._tape = tape

    def __getitem__(self, key):
        if isinstance(key, Var):
            key = key.index
        if key not in self:
            return np.zeros_like(self._tape.values[key]) if np.ndim(self._tape.values[key]) else 0.0
        return dict.__getitem__(self, key)


class Var:
    """Handle to a tape node. Shape is fixed at creation."""

    __slots__ = ("tape", "index", "shape")

    def __init__(self, tape: Tape, index: int, shape: tuple) -> None:
        self.tape = tape
        self.index = index
        self.shape = tuple(shape)

    @property
    def value(self):
        return self.tape.values[self.index]

    def __repr__(self) -> str:
        return f"Var(#{self.index}, {self.tape.opcodes[self.index]}, shape={self.shape})"

    __array_priority__ = 1000  # keep ndarray.__mul__ from swallowing Var

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
        if len(_shape(other)) == 1:
            return matvec(self, other)
        return matmul(self, other)

    def __rmatmul__(self, other):
        if len(_shape(self)) == 1:
            return matvec(other, self)
        return matmul(other, self)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            if len(self.shape) == 1:
                return take(self, int(i))
            if len(self.shape) == 2:
                return row(self, int(i))
        raise TypeError("Var supports integer indexing only")


def _tape_of(args) -> Tape | None:
    for a in args:
        if type(a) is Var:
            return a.tape
    return None


def value_of(x):
    """Plain value of a Var or passthrough for numbers/arrays."""
    return x.tape.values[x.index] if type(x) is Var else x


def _unbroadcast(g, shape):
    # scalar operand combined with an array: cotangent is the sum
    if shape == () and np.ndim(g) != 0:
        return float(np.sum(g))
    return g


def _binary_shape(op, a, b):
    sa, sb = _shape(a), _shape(b)
    if sa == sb:
        return sa
    if sa == ():
        return sb
    if sb == ():
        return sa
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform")


def add(a, b):
    shape = _binary_shape("add", a, b)
    tape = _tape_of((a, b))
    va, vb = value_of(a), value_of(b)
    out = va + vb
    if tape is None:
        return out
    sa, sb = _shape(a), _shape(b)
    if sa == sb:
        return tape.record("add", out, (a, b), lambda g: (g, g), shape)
    return tape.record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), shape)


def sub(a, b):
    shape = _binary_shape("sub", a, b)
    tape = _tape_of((a, b))
    va, vb = value_of(a), value_of(b)
    out = va - vb
    if tape is None:
        return out
    sa, sb = _shape(a), _shape(b)
    if sa == sb:
        return tape.record("sub", out, (a, b), lambda g: (g, -g), shape)
    return tape.record("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), shape)


def mul(a, b):
    shape = _binary_shape("mul", a, b)
    tape = _tape_of((a, b))
    va, vb = value_of(a), value_of(b)
    out = va * vb
    if tape is None:
        return out
    sa, sb = _shape(a), _shape(b)
    if sa == sb:
        return tape.record("mul", out, (a, b), lambda g: (g * vb, g * va), shape)
    return tape.record(
        "mul", out, (a, b), lambda g: (_unbroadcast(g * vb, sa), _unbroadcast(g * va, sb)), shape
    )


def div(a, b):
    shape = _binary_shape("div", a, b)
    tape = _tape_of((a, b))
    va, vb = value_of(a), value_of(b)
    out = va / vb
    if tape is None:
        return out
    sa, sb = _shape(a), _shape(b)
    return tape.record(
        "div", out, (a, b), lambda g: (_unbroadcast(g / vb, sa), _unbroadcast(-g * out / vb, sb)), shape
    )


def neg(a):
    if not isinstance(a, Var):
        return -a
    return a.tape.record("scale", -a.value, (a,), lambda g: (-g,), a.shape)


def scale(a, c: float):
    """Multiply by a constant scalar ``c``."""
    c = float(c)
    if not isinstance(a, Var):
        return c * a
    return a.tape.record("scale", c * a.value, (a,), lambda g: (c * g,), a.shape)


def matvec(A, x):
    sA, sx = _shape(A), _shape(x)
    if len(sA) != 2 or len(sx) != 1 or sA[1] != sx[0]:
        raise ShapeError(f"matvec: shapes {sA} and {sx} do not conform")
    tape = _tape_of((A, x))
    vA, vx = value_of(A), value_of(x)
    out = vA @ vx
    if tape is None:
        return out
    return tape.record("matvec", out, (A, x), lambda g: (np.outer(g, vx), vA.T @ g), (sA[0],))


def matmul(A, B):
    sA, sB = _shape(A), _shape(B)
    if len(sA) != 2 or len(sB) != 2 or sA[1] != sB[0]:
        raise ShapeError(f"matmul: shapes {sA} and {sB} do not conform")
    tape = _tape_of((A, B))
    vA, vB = value_of(A), value_of(B)
    out = vA @ vB
    if tape is None:
        return out
    return tape.record("matmul", out, (A, B), lambda g: (g @ vB.T, vA.T @ g), (sA[0], sB[1]))


def dot(x, y):
    sx, sy = _shape(x), _shape(y)
    if len(sx) != 1 or sx != sy:
        raise ShapeError(f"dot: shapes {sx} and {sy} do not conform")
    tape = _tape_of((x, y))
    vx, vy = value_of(x), value_of(y)
    out = float(vx @ vy)
    if tape is None:
        return out
    return tape.record("dot", out, (x, y), lambda g: (g * vy, g * vx), ())


def _unary(opcode, fn, dfn):
    def op(a):
        if not isinstance(a, Var):
            return fn(a)
        va = a.value
        out = fn(va)
        return a.tape.record(opcode, out, (a,), lambda g: (g * dfn(va, out),), a.shape)

    op.__name__ = opcode
    return op


def _tanh(x):
    return math.tanh(x) if isinstance(x, float) else np.tanh(x)


def _sin(x):
    return math.sin(x) if isinstance(x, float) else np.sin(x)


def _cos(x):
    return math.cos(x) if isinstance(x, float) else np.cos(x)


tanh = _unary("tanh", _tanh, lambda x, y: 1.0 - y * y)
sin = _unary("sin", _sin, lambda x, y: _cos(x))
cos = _unary("cos", _cos, lambda x, y: -_sin(x))
square = _unary("square", lambda x: x * x, lambda x, y: 2.0 * x)
absolute = _unary("abs", abs, lambda x, y: np.sign(x) if isinstance(x, np.ndarray) else math.copysign(1.0, x) * (x != 0.0))
absolute.__doc__ = "Elementwise |x|; derivative sign(x), 0 at the kink."


def total(a):
    """Sum of all entries -> scalar."""
    if not isinstance(a, Var):
        return float(np.sum(a))
    shape = a.shape
    if shape == ():
        return a
    return a.tape.record("sum", float(np.sum(a.value)), (a,), lambda g: (np.full(shape, g),), ())


def clamp(a, lo, hi):
    """Clip into ``[lo, hi]``; local derivative 1 strictly inside, 0 otherwise."""
    va = value_of(a)
    out = np.clip(va, lo, hi)
    if isinstance(va, float):
        out = float(out)
    if not isinstance(a, Var):
        return out
    inside = (va > lo) & (va < hi)
    if isinstance(inside, np.ndarray):
        mask = inside.astype(np.float64)
    else:
        mask = 1.0 if inside else 0.0
    return a.tape.record("clamp", out, (a,), lambda g: (g * mask,), a.shape)


def take(a, i: int):
    """Scalar entry ``i`` of a vector."""
    s = _shape(a)
    if len(s) != 1 or not -s[0] <= i < s[0]:
        raise ShapeError(f"take: index {i} invalid for shape {s}")
    va = value_of(a)
    out = float(va[i])
    if not isinstance(a, Var):
        return out
    n = s[0]

    def vjp(g):
        d = np.zeros(n)
        d[i] = g
        return (d,)

    return a.tape.record("take", out, (a,), vjp, ())


def row(M, i: int):
    """Row ``i`` of a matrix as a vector."""
    s = _shape(M)
    if len(s) != 2 or not -s[0] <= i < s[0]:
        raise ShapeError(f"row: index {i} invalid for shape {s}")
    vM = value_of(M)
    out = vM[i].copy()
    if not isinstance(M, Var):
        return out

    def vjp(g):
        d = np.zeros(s)
        d[i] = g
        return (d,)

    return M.tape.record("row", out, (M,), vjp, (s[1],))


def stack(items: Sequence):
    """Stack scalars into a vector, or equal-length vectors into matrix rows."""
    items = list(items)
    if not items:
        raise ShapeError("stack: empty argument list")
    shapes = [_shape(x) for x in items]
    if any(s != shapes[0] for s in shapes) or len(shapes[0]) > 1:
        raise ShapeError(f"stack: shapes {shapes} do not conform")
    out = np.array([value_of(x) for x in items], dtype=np.float64)
    tape = _tape_of(items)
    if tape is None:
        return out
    if len(shapes[0]) == 0:
        vjp = lambda g: tuple(float(gi) for gi in g)  # noqa: E731
    else:
        vjp = lambda g: tuple(g)  # noqa: E731
    return tape.record("stack", out, items, vjp, out.shape)


def reshape(a, shape: tuple):
    shape = tuple(shape)
    s = _shape(a)
    if int(np.prod(s)) != int(np.prod(shape)):
        raise ShapeError(f"reshape: cannot reshape {s} to {shape}")
    va = value_of(a)
    out = np.reshape(va, shape)
    if not isinstance(a, Var):
        return out
    return a.tape.record("reshape", out, (a,), lambda g: (np.reshape(g, s),), shape)


_DISPATCH = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matvec": matvec,
    "matmul": matmul,
    "dot": dot,
    "tanh": tanh,
    "sin": sin,
    "cos": cos,
    "square": square,
    "abs": absolute,
    "sum": total,
    "scale": scale,
    "clamp": clamp,
    "take": take,
    "row": row,
    "reshape": reshape,
    "neg": neg,
}
OPCODES = frozenset(_DISPATCH) | {"stack"}


def record_elementary(op: str, *args):
    """Apply elementary op ``op`` by name (``stack`` takes one list argument)."""
    if op == "stack":
        return stack(*args)
    try:
        fn = _DISPATCH[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return fn(*args)


def numeric_grad(f: Callable[[np.ndarray], float], point, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a plain scalar function."""
    x = np.array(point, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(x))
        flat[i] = old - eps
        fm = float(f(x))
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def grad_check(f: Callable, point, eps: float = 1e-6) -> float:
    """Max over coordinates of ``|g_ad - g_fd| / max(1, |g_fd|)``.

    ``f`` maps an array-like (plain or :class:`Var`) to a scalar and must be
    built from the ops of this module.
    """
    x = np.array(point, dtype=np.float64)
    tape = Tape()
    xv = tape.var(x if x.ndim else float(x))
    loss = f(xv)
    if not isinstance(loss, Var):
        g_ad = np.zeros_like(x)
    else:
        g_ad = np.asarray(tape.backward(loss)[xv], dtype=np.float64)
    g_fd = numeric_grad(lambda p: value_of(f(p if p.ndim else float(p))), x, eps)
    err = np.abs(g_ad - g_fd) / np.maximum(1.0, np.abs(g_fd))
    return float(np.max(err)) if err.size else 0.0
