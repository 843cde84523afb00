"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records :class:`Node` objects in creation order, which is a
topological order by construction. Primitives are plain functions taking
nodes (or array-likes, which are wrapped as constants) and returning a new
node on the same tape. ``backward`` walks the tape in reverse.

Elementwise primitives follow numpy broadcasting; gradients are summed back
to the operand shape.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Node:
    __slots__ = ("value", "_grad", "parents", "op", "tape", "requires_grad", "_backward", "name")

    def __init__(self, tape, value, parents=(), op="leaf", requires_grad=True, name=None):
        self.tape = tape
        self.value = value
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad
        self._backward = None
        self._grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True).reshape(self.value.shape)
        else:
            self._grad += g

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return slice_(self, index)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"


class Tape:
    """Ordered record of nodes; parents always precede children."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _append(self, node):
        self.nodes.append(node)
        return node

    def leaf(self, value, name=None) -> Node:
        arr = np.array(value, dtype=np.float64)
        return self._append(Node(self, arr, name=name))

    def constant(self, value) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        return self._append(Node(self, arr, op="const", requires_grad=False))

    def __len__(self):
        return len(self.nodes)


def _as_node(x, tape):
    if isinstance(x, Node):
        return x
    if tape is None:
        raise TypeError("at least one operand must be a Node")
    return tape.constant(x)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _make(tape, value, parents, op, backward):
    req = any(p.requires_grad for p in parents)
    node = Node(tape, value, parents, op, requires_grad=req)
    if req:
        node._backward = backward
    return tape._append(node)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------- binary


def add(a, b):
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    _broadcast_shape("add", a, b)

    def bw(g):
        a._accumulate(unbroadcast(g, a.shape))
        b._accumulate(unbroadcast(g, b.shape))

    return _make(tape, a.value + b.value, (a, b), "add", bw)


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    _broadcast_shape("sub", a, b)

    def bw(g):
        a._accumulate(unbroadcast(g, a.shape))
        b._accumulate(unbroadcast(-g, b.shape))

    return _make(tape, a.value - b.value, (a, b), "sub", bw)


def mul(a, b):
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    _broadcast_shape("mul", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(g * a.value, b.shape))

    return _make(tape, a.value * b.value, (a, b), "mul", bw)


def div(a, b):
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    _broadcast_shape("div", a, b)
    if np.any(b.value == 0):
        raise DomainError("div: zero divisor (clamp the denominator first)")
    out = a.value / b.value

    def bw(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g / b.value, a.shape))
        if b.requires_grad:
            b._accumulate(unbroadcast(-g * out / b.value, b.shape))

    return _make(tape, out, (a, b), "div", bw)


def matmul(a, b):
    """``a @ b`` for ``a`` of shape (..., n, k) and ``b`` of shape (k, m) or (..., k, m)."""
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires_grad:
            if b.value.ndim == 2:
                av = a.value.reshape(-1, a.shape[-1])
                b._accumulate(av.T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    return _make(tape, a.value @ b.value, (a, b), "matmul", bw)


# ---------------------------------------------------------------- structural


def concat(xs: Sequence, axis=-1):
    tape = _tape_of(*xs)
    xs = [_as_node(x, tape) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}") from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        for x, piece in zip(xs, np.split(g, sizes, axis=axis)):
            x._accumulate(piece)

    return _make(tape, out, xs, "concat", bw)


def slice_(x, index):
    tape = x.tape
    out = x.value[index]
    if isinstance(out, np.ndarray) and out.base is not None:
        out = out.copy()
    out = np.asarray(out, dtype=np.float64)

    def bw(g):
        full = np.zeros_like(x.value)
        np.add.at(full, index, g)
        x._accumulate(full)

    return _make(tape, out, (x,), "slice", bw)


def reshape(x, shape):
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.tape, out, (x,), "reshape", bw)


# ---------------------------------------------------------------- elementwise


def exp(x):
    out = np.exp(x.value)

    def bw(g):
        x._accumulate(g * out)

    return _make(x.tape, out, (x,), "exp", bw)


def log(x):
    if np.any(x.value <= 0):
        raise DomainError("log: non-positive operand (clamp first)")

    def bw(g):
        x._accumulate(g / x.value)

    return _make(x.tape, np.log(x.value), (x,), "log", bw)


def tanh(x):
    out = np.tanh(x.value)

    def bw(g):
        x._accumulate(g * (1.0 - out * out))

    return _make(x.tape, out, (x,), "tanh", bw)


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x):
    out = _sigmoid(x.value)

    def bw(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(x.tape, out, (x,), "sigmoid", bw)


def softplus(x):
    v = x.value
    out = np.logaddexp(0.0, v)

    def bw(g):
        x._accumulate(g * _sigmoid(v))

    return _make(x.tape, out, (x,), "softplus", bw)


def square(x):
    def bw(g):
        x._accumulate(2.0 * g * x.value)

    return _make(x.tape, x.value * x.value, (x,), "square", bw)


def sqrt(x):
    if np.any(x.value <= 0):
        raise DomainError("sqrt: non-positive operand")
    out = np.sqrt(x.value)

    def bw(g):
        x._accumulate(0.5 * g / out)

    return _make(x.tape, out, (x,), "sqrt", bw)


def reciprocal(x):
    if np.any(x.value == 0):
        raise DomainError("reciprocal: zero operand")
    out = 1.0 / x.value

    def bw(g):
        x._accumulate(-g * out * out)

    return _make(x.tape, out, (x,), "reciprocal", bw)


def clamp_min(x, floor):
    mask = x.value > floor
    out = np.where(mask, x.value, floor)

    def bw(g):
        x._accumulate(g * mask)

    return _make(x.tape, out, (x,), "clamp_min", bw)


def stop_gradient(x):
    return x.tape.constant(x.value.copy())


# ---------------------------------------------------------------- reductions


def sum_(x, axis=None, keepdims=False):
    out = np.asarray(x.value.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(x.tape, out, (x,), "sum", bw)


def mean(x, axis=None, keepdims=False):
    out = np.asarray(x.value.mean(axis=axis, keepdims=keepdims), dtype=np.float64)
    count = x.value.size / max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g / count, x.shape))

    return _make(x.tape, out, (x,), "mean", bw)


def softmax(x, axis=-1):
    v = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(v)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(x.tape, out, (x,), "softmax", bw)


def l2norm(x, axis=-1):
    out = np.sqrt((x.value * x.value).sum(axis=axis))
    if np.any(out == 0):
        raise DomainError("l2norm: zero vector")

    def bw(g):
        x._accumulate(np.expand_dims(g / out, axis) * x.value)

    return _make(x.tape, out, (x,), "l2norm", bw)


# ---------------------------------------------------------------- fused GRU


def gru_layer(x, w_in, w_hid, b_in, b_hid, reverse=False):
    """One GRU direction over a batch of sequences.

    ``x`` is (B, T, D_in); weights are (D_in, 3H), (H, 3H) with gate blocks
    ordered reset, update, candidate. Returns hidden states (B, T, H) with a
    zero initial state. With ``reverse`` the recurrence runs from the last
    frame to the first and outputs stay aligned with input frames.
    """
    tape = _tape_of(x, w_in, w_hid, b_in, b_hid)
    x, w_in, w_hid, b_in, b_hid = (_as_node(v, tape) for v in (x, w_in, w_hid, b_in, b_hid))
    if x.value.ndim != 3 or w_in.shape[0] != x.shape[2] or w_in.shape[1] % 3:
        raise ShapeError(f"gru_layer: input {x.shape} incompatible with w_in {w_in.shape}")
    H = w_in.shape[1] // 3
    if w_hid.shape != (H, 3 * H) or b_in.shape != (3 * H,) or b_hid.shape != (3 * H,):
        raise ShapeError(f"gru_layer: bad recurrent shapes {w_hid.shape}, {b_in.shape}, {b_hid.shape}")

    xs = x.value[:, ::-1] if reverse else x.value
    B, T, _ = xs.shape
    Wh = w_hid.value
    gx = xs @ w_in.value + b_in.value
    hs = np.zeros((B, T + 1, H))
    r_all = np.empty((B, T, H))
    z_all = np.empty((B, T, H))
    n_all = np.empty((B, T, H))
    ghn_all = np.empty((B, T, H))
    for t in range(T):
        h = hs[:, t]
        gh = h @ Wh + b_hid.value
        r = _sigmoid(gx[:, t, :H] + gh[:, :H])
        z = _sigmoid(gx[:, t, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gx[:, t, 2 * H:] + r * gh[:, 2 * H:])
        hs[:, t + 1] = (1.0 - z) * n + z * h
        r_all[:, t], z_all[:, t], n_all[:, t], ghn_all[:, t] = r, z, n, gh[:, 2 * H:]
    out = hs[:, 1:]
    if reverse:
        out = out[:, ::-1]
    out = np.ascontiguousarray(out)

    def bw(g):
        g = g[:, ::-1] if reverse else g
        dgx = np.empty((B, T, 3 * H))
        dgh = np.empty((B, T, 3 * H))
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = dh + g[:, t]
            r, z, n, ghn = r_all[:, t], z_all[:, t], n_all[:, t], ghn_all[:, t]
            h = hs[:, t]
            da_n = dh * (1.0 - z) * (1.0 - n * n)
            da_z = dh * (h - n) * z * (1.0 - z)
            da_r = da_n * ghn * r * (1.0 - r)
            dgx[:, t, :H] = da_r
            dgx[:, t, H:2 * H] = da_z
            dgx[:, t, 2 * H:] = da_n
            dgh[:, t, :H] = da_r
            dgh[:, t, H:2 * H] = da_z
            dgh[:, t, 2 * H:] = da_n * r
            dh = dh * z + dgh[:, t] @ Wh.T
        if x.requires_grad:
            dx = dgx @ w_in.value.T
            x._accumulate(dx[:, ::-1] if reverse else dx)
        if w_in.requires_grad:
            w_in._accumulate(xs.reshape(-1, xs.shape[2]).T @ dgx.reshape(-1, 3 * H))
        if b_in.requires_grad:
            b_in._accumulate(dgx.sum(axis=(0, 1)))
        if w_hid.requires_grad:
            w_hid._accumulate(hs[:, :-1].reshape(-1, H).T @ dgh.reshape(-1, 3 * H))
        if b_hid.requires_grad:
            b_hid._accumulate(dgh.sum(axis=(0, 1)))

    return _make(tape, out, (x, w_in, w_hid, b_in, b_hid), "gru", bw)


def gru_layer_composed(x, w_in, w_hid, b_in, b_hid, reverse=False):
    """Same recurrence as :func:`gru_layer`, built from elementary primitives.

    Slow; exists so the fused rule can be checked against an independent path.
    """
    tape = _tape_of(x, w_in, w_hid, b_in, b_hid)
    x, w_in, w_hid, b_in, b_hid = (_as_node(v, tape) for v in (x, w_in, w_hid, b_in, b_hid))
    B, T, _ = x.shape
    H = w_hid.shape[0]
    h = tape.constant(np.zeros((B, H)))
    outs = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        gx = x[:, t, :] @ w_in + b_in
        gh = h @ w_hid + b_hid
        r = sigmoid(gx[:, :H] + gh[:, :H])
        z = sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
        n = tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
        h = (1.0 - z) * n + z * h
        outs[t] = reshape(h, (B, 1, H))
    return concat(outs, axis=1)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "softmax": softmax,
    "sum": sum_,
    "mean": mean,
    "square": square,
    "sqrt": sqrt,
    "l2norm": l2norm,
    "reciprocal": reciprocal,
    "clamp_min": clamp_min,
    "gru": gru_layer,
}


def forward_primitive(op, *inputs, **kwargs) -> Node:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


def safe_log(x, floor=LOG_FLOOR):
    return log(clamp_min(x, floor))


def backward(tape: Tape, root: Node) -> None:
    """Populate ``grad`` on every node of ``tape`` with d(root)/d(node).

    Gradients are reset first, so calling this twice is idempotent.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if root.tape is not tape:
        raise ValueError("backward: root does not belong to this tape")
    for node in tape.nodes:
        node._grad = None
    root._grad = np.ones_like(root.value)
    for node in reversed(tape.nodes):
        if node._grad is not None and node._backward is not None:
            node._backward(node._grad)


def grad_check(build: Callable[[Tape, Node], Node], point, step=1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build(tape, x)`` must return a scalar node computed from the leaf ``x``.
    Relative error per coordinate is ``|a - n| / max(1, |n|)``.
    """
    if not step > 0:
        raise ValueError("grad_check: step must be positive")
    point = np.array(point, dtype=np.float64)

    def evaluate(p):
        tape = Tape()
        x = tape.leaf(p)
        out = build(tape, x)
        return tape, x, out

    tape, x, out = evaluate(point)
    if not np.all(np.isfinite(out.value)):
        raise ValueError("grad_check: non-finite output at point")
    backward(tape, out)
    analytic = x.grad
    numeric = np.empty_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(evaluate(point)[2].value)
        flat[i] = orig - step
        fm = float(evaluate(point)[2].value)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("grad_check: non-finite output near point")
        numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def grad_check_params(build: Callable[[Tape, dict], Node], params: dict, step=1e-5) -> float:
    """Like :func:`grad_check` but over a dict of named parameter arrays."""
    if not step > 0:
        raise ValueError("grad_check: step must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate():
        tape = Tape()
        leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
        return tape, leaves, build(tape, leaves)

    tape, leaves, out = evaluate()
    if not np.all(np.isfinite(out.value)):
        raise ValueError("grad_check: non-finite output at point")
    backward(tape, out)
    worst = 0.0
    for k, arr in params.items():
        analytic = leaves[k].grad
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(evaluate()[2].value)
            flat[i] = orig - step
            fm = float(evaluate()[2].value)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError("grad_check: non-finite output near point")
            num = (fp - fm) / (2 * step)
            worst = max(worst, abs(analytic.reshape(-1)[i] - num) / max(1.0, abs(num)))
    return worst
