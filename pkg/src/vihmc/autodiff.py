"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every value is a float64 array. A :class:`Tape` stores primitive nodes in
evaluation order; :meth:`Tape.backward` sweeps them in reverse. Cotangents
may carry extra *leading* dimensions, so one sweep can push a stack of seeds
(one per network output, say) through the graph at once.

A recorded tape can be re-evaluated on new leaf values with
:meth:`Tape.replay`. Samplers call the same graph millions of times and
replaying skips the graph-building overhead.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "PRIMITIVES",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "sin",
    "tanh",
    "softplus",
    "square",
    "log",
    "exp",
    "sum",
    "dot",
    "segment",
    "transpose",
    "affine",
    "sumsq",
    "grad_output",
    "grad_scalar",
    "jacobian_output",
]


def _fit(g, shape, out_nd):
    """Map a cotangent of a broadcast result back onto an input of ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - out_nd
    pad = out_nd - len(shape)
    if pad:
        g = g.sum(axis=tuple(range(lead, lead + pad)))
    axes = tuple(lead + k for k, n in enumerate(shape) if n == 1 and g.shape[lead + k] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# Each primitive: forward(args, attr) -> value and
# backward(g, args, out, attr, need) -> cotangents aligned with args
# (None wherever need[k] is False).


def _f_add(a, attr):
    return a[0] + a[1]


def _b_add(g, a, out, attr, need):
    nd = out.ndim
    return (
        _fit(g, a[0].shape, nd) if need[0] else None,
        _fit(g, a[1].shape, nd) if need[1] else None,
    )


def _f_sub(a, attr):
    return a[0] - a[1]


def _b_sub(g, a, out, attr, need):
    nd = out.ndim
    return (
        _fit(g, a[0].shape, nd) if need[0] else None,
        _fit(-g, a[1].shape, nd) if need[1] else None,
    )


def _f_mul(a, attr):
    return a[0] * a[1]


def _b_mul(g, a, out, attr, need):
    nd = out.ndim
    return (
        _fit(g * a[1], a[0].shape, nd) if need[0] else None,
        _fit(g * a[0], a[1].shape, nd) if need[1] else None,
    )


def _f_neg(a, attr):
    return -a[0]


def _b_neg(g, a, out, attr, need):
    return (-g,)


def _f_sin(a, attr):
    return np.sin(a[0])


def _b_sin(g, a, out, attr, need):
    return (g * np.cos(a[0]),)


def _f_tanh(a, attr):
    return np.tanh(a[0])


def _b_tanh(g, a, out, attr, need):
    return (g * (1.0 - out * out),)


def _f_softplus(a, attr):
    return np.logaddexp(0.0, a[0])


def _b_softplus(g, a, out, attr, need):
    # derivative of log(1 + e^x) is the logistic function
    return (g * (0.5 * (1.0 + np.tanh(0.5 * a[0]))),)


def _f_square(a, attr):
    return a[0] * a[0]


def _b_square(g, a, out, attr, need):
    return (g * (2.0 * a[0]),)


def _f_log(a, attr):
    return np.log(a[0])


def _b_log(g, a, out, attr, need):
    return (g / a[0],)


def _f_exp(a, attr):
    return np.exp(a[0])


def _b_exp(g, a, out, attr, need):
    return (g * out,)


def _f_sum(a, attr):
    return np.asarray(a[0].sum(axis=attr))


def _b_sum(g, a, out, attr, need):
    shape = a[0].shape
    if attr is None:
        if g.ndim == 0:
            return (np.full(shape, g),)
        return (np.broadcast_to(g.reshape(g.shape + (1,) * len(shape)), g.shape + shape),)
    lead = g.shape[: g.ndim - out.ndim]
    ax = attr % len(shape)
    return (np.broadcast_to(np.expand_dims(g, len(lead) + ax), lead + shape),)


def _f_sumsq(a, attr):
    x = a[0].ravel()
    return np.asarray(x @ x)


def _b_sumsq(g, a, out, attr, need):
    x = a[0]
    if g.ndim == 0:
        return ((2.0 * g) * x,)
    return ((2.0 * g).reshape(g.shape + (1,) * x.ndim) * x,)


def _f_matmul(a, attr):
    return a[0] @ a[1]


def _b_matmul(g, a, out, attr, need):
    ga = gb = None
    if need[0]:
        ga = g @ a[1].T
    if need[1]:
        gb = a[0].T @ g if g.ndim == 2 else np.einsum("ij,...jk->...ik", a[0].T, g)
    return ga, gb


def _f_dot(a, attr):
    return (a[0] * a[1]).sum(axis=-1)


def _b_dot(g, a, out, attr, need):
    ge = g[..., None]
    nd = out.ndim + 1
    return (
        _fit(ge * a[1], a[0].shape, nd) if need[0] else None,
        _fit(ge * a[0], a[1].shape, nd) if need[1] else None,
    )


def _f_segment(a, attr):
    start, stop, shape, tr = attr
    out = a[0][start:stop].reshape(shape)
    return out.T if tr else out


def _b_segment(g, a, out, attr, need):
    start, stop, shape, tr = attr
    if tr:
        g = np.swapaxes(g, -1, -2)
    lead = g.shape[: g.ndim - len(shape)]
    full = np.zeros(lead + a[0].shape)
    full[..., start:stop] = g.reshape(lead + (stop - start,))
    return (full,)


def _f_affine(a, attr):
    ws, n_out, n_in, bs = attr
    W = a[1][ws : ws + n_out * n_in].reshape(n_out, n_in)
    h = a[0] @ W.T
    if bs >= 0:
        h = h + a[1][bs : bs + n_out]
    return h


def _b_affine(g, a, out, attr, need):
    ws, n_out, n_in, bs = attr
    theta = a[1]
    gx = gt = None
    if need[0]:
        gx = g @ theta[ws : ws + n_out * n_in].reshape(n_out, n_in)
    if need[1]:
        lead = g.shape[: g.ndim - out.ndim]
        gt = np.zeros(lead + theta.shape)
        gW = np.swapaxes(g, -1, -2) @ a[0]
        gt[..., ws : ws + n_out * n_in] = gW.reshape(lead + (n_out * n_in,))
        if bs >= 0:
            gt[..., bs : bs + n_out] = g.sum(axis=-2)
    return gx, gt


def _f_transpose(a, attr):
    return a[0].T


def _b_transpose(g, a, out, attr, need):
    return (np.swapaxes(g, -1, -2),)


PRIMITIVES = {
    "add": (_f_add, _b_add),
    "sub": (_f_sub, _b_sub),
    "mul": (_f_mul, _b_mul),
    "neg": (_f_neg, _b_neg),
    "sin": (_f_sin, _b_sin),
    "tanh": (_f_tanh, _b_tanh),
    "softplus": (_f_softplus, _b_softplus),
    "square": (_f_square, _b_square),
    "log": (_f_log, _b_log),
    "exp": (_f_exp, _b_exp),
    "sum": (_f_sum, _b_sum),
    "matmul": (_f_matmul, _b_matmul),
    "dot": (_f_dot, _b_dot),
    "segment": (_f_segment, _b_segment),
    "transpose": (_f_transpose, _b_transpose),
    "affine": (_f_affine, _b_affine),
    "sumsq": (_f_sumsq, _b_sumsq),
}


class Var:
    """Handle to one node on a :class:`Tape`."""

    __slots__ = ("tape", "idx")
    __array_priority__ = 1000.0

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.value.shape})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Append-only record of primitive evaluations.

    ``ops[i]`` names the primitive of node ``i`` and ``args[i]`` its inputs,
    each an ``int`` (an earlier node) or a constant array. ``values[i]`` is the
    forward result; after :meth:`backward`, ``adjoints[i]`` holds the
    accumulated cotangent (``None`` where nothing flowed).
    """

    def __init__(self):
        self.ops: list[str] = []
        self.args: list[tuple] = []
        self.attrs: list = []
        self.values: list[np.ndarray] = []
        self.adjoints: list | None = None
        self._plan = None
        # filled in by callers that build a network graph on this tape
        self.params: Var | None = None
        self.output: Var | None = None
        self.root: Var | None = None
        self.leaves: dict[str, Var] = {}

    def __len__(self):
        return len(self.values)

    @property
    def nodes(self):
        return list(zip(self.ops, self.args))

    def variable(self, value) -> Var:
        """Register a leaf (an independent variable)."""
        return self._push("leaf", (), None, np.array(value, dtype=np.float64))

    def _push(self, op, args, attr, value) -> Var:
        self._plan = None
        self.ops.append(op)
        self.args.append(args)
        self.attrs.append(attr)
        self.values.append(value)
        return Var(self, len(self.values) - 1)

    def record(self, op: str, inputs, attr=None) -> Var:
        args = tuple(x.idx if isinstance(x, Var) else np.asarray(x, dtype=np.float64) for x in inputs)
        for x in inputs:
            if isinstance(x, Var) and x.tape is not self:
                raise ValueError("operands live on different tapes")
        vals = self.values
        av = [vals[a] if type(a) is int else a for a in args]
        return self._push(op, args, attr, PRIMITIVES[op][0](av, attr))

    def replay(self, leaves: dict[int, np.ndarray]) -> None:
        """Recompute every node after assigning new values to the given leaves."""
        vals = self.values
        ops = self.ops
        for i, v in leaves.items():
            if ops[i] != "leaf":
                raise ValueError(f"node {i} is not a leaf")
            vals[i] = np.asarray(v, dtype=np.float64)
        for i, fwd, _, args, _, attr in self._compiled():
            vals[i] = fwd([vals[a] if n else a for a, n in args], attr)
        self.adjoints = None

    def _compiled(self):
        # static per-node dispatch data, rebuilt only when nodes are appended
        if self._plan is None:
            plan = []
            for i, op in enumerate(self.ops):
                if op == "leaf":
                    continue
                fwd, bwd = PRIMITIVES[op]
                args = tuple((a, type(a) is int) for a in self.args[i])
                need = [n for _, n in args]
                plan.append((i, fwd, bwd, args, need, self.attrs[i]))
            self._plan = plan
            self._rplan = plan[::-1]
        return self._plan

    def _reversed(self):
        self._compiled()
        return self._rplan

    def backward(self, root: Var, seed=None) -> list:
        """Propagate ``seed`` from ``root`` back to every node.

        ``seed`` defaults to ones of the root's shape. A seed of shape
        ``(K, *root.shape)`` propagates K cotangents at once.
        """
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        vals = self.values
        seed = np.ones_like(vals[root.idx]) if seed is None else np.asarray(seed, dtype=np.float64)
        adj: list = [None] * len(vals)
        adj[root.idx] = seed
        r = root.idx
        for i, _, bwd, args, need, attr in self._reversed():
            if i > r:
                continue
            g = adj[i]
            if g is None:
                continue
            grads = bwd(g, [vals[a] if n else a for a, n in args], vals[i], attr, need)
            for (a, n), ga in zip(args, grads):
                if n:
                    prev = adj[a]
                    adj[a] = ga if prev is None else prev + ga
        self.adjoints = adj
        return adj

    def adjoint(self, var: Var) -> np.ndarray:
        """Adjoint of ``var`` after :meth:`backward`; zeros when unreached."""
        if self.adjoints is None:
            raise RuntimeError("backward has not been run on this tape")
        a = self.adjoints[var.idx]
        if a is None:
            return np.zeros_like(var.value)
        return a


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TypeError("at least one operand must be a Var")


def add(a, b) -> Var:
    return _tape_of(a, b).record("add", (a, b))


def sub(a, b) -> Var:
    return _tape_of(a, b).record("sub", (a, b))


def mul(a, b) -> Var:
    return _tape_of(a, b).record("mul", (a, b))


def neg(a: Var) -> Var:
    return a.tape.record("neg", (a,))


def sin(a: Var) -> Var:
    return a.tape.record("sin", (a,))


def tanh(a: Var) -> Var:
    return a.tape.record("tanh", (a,))


def softplus(a: Var) -> Var:
    return a.tape.record("softplus", (a,))


def square(a: Var) -> Var:
    return a.tape.record("square", (a,))


def log(a: Var) -> Var:
    return a.tape.record("log", (a,))


def exp(a: Var) -> Var:
    return a.tape.record("exp", (a,))


def sum(a: Var, axis=None) -> Var:  # noqa: A001 - mirrors numpy
    return a.tape.record("sum", (a,), axis)


def sumsq(a: Var) -> Var:
    """Sum of squares of every entry (a scalar)."""
    return a.tape.record("sumsq", (a,))


def matmul(a, b) -> Var:
    """Matrix product of 2-D operands (covers matrix-vector products)."""
    sa = a.value.shape if isinstance(a, Var) else np.shape(a)
    sb = b.value.shape if isinstance(b, Var) else np.shape(b)
    if len(sa) != 2 or len(sb) != 2:
        raise ValueError(f"matmul expects 2-D operands, got {sa} @ {sb}")
    return _tape_of(a, b).record("matmul", (a, b))


def dot(a, b) -> Var:
    """Inner product over the last axis (row-wise for 2-D operands)."""
    return _tape_of(a, b).record("dot", (a, b))


def segment(a: Var, start: int, shape, transpose: bool = False) -> Var:
    """Contiguous slice of a flat vector, reshaped to ``shape``.

    With ``transpose=True`` the 2-D block comes back transposed, so weights
    stored (out, in) can be applied as ``x @ W.T`` without an extra node.
    """
    shape = tuple(shape)
    stop = start + math.prod(shape)
    if stop > a.value.shape[0]:
        raise IndexError(f"segment [{start}, {stop}) exceeds vector of length {a.value.shape[0]}")
    return a.tape.record("segment", (a,), (start, stop, shape, transpose))


def affine(x, theta: Var, w_start: int, n_out: int, n_in: int, b_start: int | None = None) -> Var:
    """Dense layer read from a flat vector: ``x @ W.T + b``.

    ``W`` is the (n_out, n_in) row-major block at ``w_start`` of ``theta`` and
    ``b`` the ``n_out`` entries at ``b_start`` (no bias when None).
    """
    sx = x.value.shape if isinstance(x, Var) else np.shape(x)
    if len(sx) != 2 or sx[1] != n_in:
        raise ValueError(f"affine expects input of shape (batch, {n_in}), got {sx}")
    end = max(w_start + n_out * n_in, -1 if b_start is None else b_start + n_out)
    if end > theta.value.shape[0]:
        raise IndexError(f"affine block ends at {end}, vector has length {theta.value.shape[0]}")
    bs = -1 if b_start is None else int(b_start)
    return theta.tape.record("affine", (x, theta), (int(w_start), int(n_out), int(n_in), bs))


def transpose(a: Var) -> Var:
    return a.tape.record("transpose", (a,))


def grad_output(tape: Tape, index) -> np.ndarray:
    """Gradient of one entry of ``tape.output`` with respect to ``tape.params``.

    ``index`` is a flat integer or a tuple into the output array.
    """
    out = tape.output
    if out is None or tape.params is None:
        raise ValueError("tape has no recorded network output")
    shape = out.value.shape
    size = out.value.size
    if isinstance(index, tuple):
        try:
            flat = int(np.ravel_multi_index(index, shape))
        except ValueError as exc:
            raise IndexError(f"output index {index} out of range for shape {shape}") from exc
    else:
        flat = int(index)
    if not 0 <= flat < size:
        raise IndexError(f"output index {index} out of range for shape {shape}")
    seed = np.zeros(size)
    seed[flat] = 1.0
    tape.backward(out, seed.reshape(shape))
    return tape.adjoint(tape.params).copy()


def jacobian_output(tape: Tape, rows=None) -> np.ndarray:
    """Gradients of several output entries stacked, from one reverse sweep.

    ``rows`` selects flat output indices (default: all). Returns an array of
    shape (len(rows), n_params).
    """
    out = tape.output
    if out is None or tape.params is None:
        raise ValueError("tape has no recorded network output")
    shape = out.value.shape
    size = out.value.size
    rows = np.arange(size) if rows is None else np.asarray(rows)
    seed = np.zeros((rows.size, size))
    seed[np.arange(rows.size), rows] = 1.0
    tape.backward(out, seed.reshape((rows.size,) + shape))
    return tape.adjoint(tape.params).reshape(rows.size, -1).copy()


def grad_scalar(tape: Tape, root: Var | None = None, wrt: Var | None = None) -> np.ndarray:
    """Reverse-mode gradient of a scalar root (default ``tape.root``)."""
    root = root if root is not None else tape.root
    wrt = wrt if wrt is not None else tape.params
    if root is None or wrt is None:
        raise ValueError("tape has no scalar root or parameter leaf")
    if root.value.size != 1:
        raise ValueError(f"root must be scalar, got shape {root.value.shape}")
    tape.backward(root, np.ones_like(root.value))
    return tape.adjoint(wrt).copy()
