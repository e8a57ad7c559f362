"""Reverse-mode automatic differentiation over an explicit operation tape.

Values are float64 numpy arrays of any rank (scalars are 0-d). A Tape records
primitive operations append-only, so every node's operands precede it.
``backward`` sweeps the tape once in reverse and returns gradients for the
registered parameter leaves. A tape is single-threaded; independent tapes
share no state.

Training code rebuilds (clears) the tape for every segment; values that cross
a segment boundary re-enter as constants, which truncates gradient flow there.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "reduce_sum",
    "concat",
    "select",
    "softmax",
    "broadcast",
    "reshape",
    "grad_check",
    "stable_sigmoid",
]


def _f64(x):
    return np.asarray(x, dtype=np.float64)


def stable_sigmoid(x):
    """Logistic sigmoid, exact in float64 and overflow-free for any input."""
    x = _f64(x)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


class Node:
    """Handle to one recorded value on a tape."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __add__(self, other):
        return add(self, _as_node(self.tape, other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_node(self.tape, other))

    def __rsub__(self, other):
        return sub(_as_node(self.tape, other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_node(self.tape, other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Node(idx={self.idx}, kind={self.tape._kinds[self.idx]}, shape={self.value.shape})"


def _as_node(tape, x):
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return x
    return tape.constant(x)


# ---------------------------------------------------------------------------
# forward rules: kind -> fn(parent_values, aux) -> value
# ---------------------------------------------------------------------------


def _fwd_add(p, aux):
    return p[0] + p[1]


def _fwd_sub(p, aux):
    return p[0] - p[1]


def _fwd_mul(p, aux):
    return p[0] * p[1]


def _fwd_scale(p, aux):
    return p[0] * aux


def _fwd_matmul(p, aux):
    a, b = p
    if a.ndim != 2:
        raise ValueError(f"matmul: left operand must be 2-d, got shape {a.shape}")
    if b.ndim == 0 or b.shape[0] != a.shape[1]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.ndim <= 2:
        return a @ b
    # contract over b's first axis; cheaper than tensordot's axis juggling
    return (a @ b.reshape(b.shape[0], -1)).reshape((a.shape[0],) + b.shape[1:])


def _fwd_tanh(p, aux):
    return np.tanh(p[0])


def _fwd_sigmoid(p, aux):
    return stable_sigmoid(p[0])


def _fwd_exp(p, aux):
    return np.exp(p[0])


def _fwd_log(p, aux):
    return np.log(p[0])


def _fwd_sum(p, aux):
    axis, keepdims = aux
    return np.sum(p[0], axis=axis, keepdims=keepdims)


def _fwd_concat(p, aux):
    axis = aux
    for v in p:
        if v.ndim != p[0].ndim:
            raise ValueError("concat: operands differ in rank")
    return np.concatenate(p, axis=axis)


def _fwd_select(p, aux):
    start, stop = aux
    v = p[0]
    if not (0 <= start <= stop <= v.shape[0]):
        raise ValueError(f"select: rows [{start}:{stop}] out of range for shape {v.shape}")
    return v[start:stop]


def _fwd_softmax(p, aux):
    axis = aux
    v = p[0]
    m = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def _fwd_broadcast(p, aux):
    return np.broadcast_to(p[0], aux)


def _fwd_reshape(p, aux):
    return p[0].reshape(aux)


_FORWARD = {
    "add": _fwd_add,
    "sub": _fwd_sub,
    "mul": _fwd_mul,
    "scale": _fwd_scale,
    "matmul": _fwd_matmul,
    "tanh": _fwd_tanh,
    "sigmoid": _fwd_sigmoid,
    "exp": _fwd_exp,
    "log": _fwd_log,
    "sum": _fwd_sum,
    "concat": _fwd_concat,
    "select": _fwd_select,
    "softmax": _fwd_softmax,
    "broadcast": _fwd_broadcast,
    "reshape": _fwd_reshape,
}


# ---------------------------------------------------------------------------
# adjoint rules
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    """Sum g over axes that were broadcast relative to `shape`."""
    if g.shape == shape:
        return g, False
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g).reshape(shape), True


def _bwd_add(g, parents, aux, vals, i, acc):
    for j in parents:
        arr, own = _unbroadcast(g, vals[j].shape)
        acc(j, arr, own)


def _bwd_sub(g, parents, aux, vals, i, acc):
    a, b = parents
    arr, own = _unbroadcast(g, vals[a].shape)
    acc(a, arr, own)
    arr, _ = _unbroadcast(g, vals[b].shape)
    acc(b, -arr, True)


def _bwd_mul(g, parents, aux, vals, i, acc):
    a, b = parents
    arr, _ = _unbroadcast(g * vals[b], vals[a].shape)
    acc(a, arr, True)
    arr, _ = _unbroadcast(g * vals[a], vals[b].shape)
    acc(b, arr, True)


def _bwd_scale(g, parents, aux, vals, i, acc):
    acc(parents[0], g * aux, True)


def _bwd_matmul(g, parents, aux, vals, i, acc):
    a, b = parents
    bv = vals[b]
    if bv.ndim == 1:
        acc(a, np.outer(g, bv), True)
        acc(b, vals[a].T @ g, True)
    else:
        g2 = g.reshape(g.shape[0], -1)
        b2 = bv.reshape(bv.shape[0], -1)
        acc(a, g2 @ b2.T, True)
        acc(b, (vals[a].T @ g2).reshape(bv.shape), True)


def _bwd_tanh(g, parents, aux, vals, i, acc):
    out = vals[i]
    acc(parents[0], g * (1.0 - out * out), True)


def _bwd_sigmoid(g, parents, aux, vals, i, acc):
    out = vals[i]
    acc(parents[0], g * out * (1.0 - out), True)


def _bwd_exp(g, parents, aux, vals, i, acc):
    acc(parents[0], g * vals[i], True)


def _bwd_log(g, parents, aux, vals, i, acc):
    acc(parents[0], g / vals[parents[0]], True)


def _bwd_sum(g, parents, aux, vals, i, acc):
    axis, keepdims = aux
    src = vals[parents[0]]
    if axis is None:
        acc(parents[0], np.broadcast_to(g, src.shape), False)
        return
    if not keepdims:
        ax = axis if isinstance(axis, tuple) else (axis,)
        shape = list(src.shape)
        for a in ax:
            shape[a] = 1
        g = g.reshape(shape)
    acc(parents[0], np.broadcast_to(g, src.shape), False)


def _bwd_concat(g, parents, aux, vals, i, acc):
    axis = aux
    ofs = 0
    sl = [slice(None)] * g.ndim
    for j in parents:
        n = vals[j].shape[axis]
        sl[axis] = slice(ofs, ofs + n)
        acc(j, g[tuple(sl)], False)
        ofs += n


def _bwd_select(g, parents, aux, vals, i, acc):
    start, stop = aux
    out = np.zeros_like(vals[parents[0]])
    out[start:stop] = g
    acc(parents[0], out, True)


def _bwd_softmax(g, parents, aux, vals, i, acc):
    axis = aux
    s = vals[i]
    t = g * s
    acc(parents[0], t - s * np.sum(t, axis=axis, keepdims=True), True)


def _bwd_broadcast(g, parents, aux, vals, i, acc):
    arr, own = _unbroadcast(g, vals[parents[0]].shape)
    acc(parents[0], arr, own)


def _bwd_reshape(g, parents, aux, vals, i, acc):
    acc(parents[0], g.reshape(vals[parents[0]].shape), False)


_BACKWARD = {
    "add": _bwd_add,
    "sub": _bwd_sub,
    "mul": _bwd_mul,
    "scale": _bwd_scale,
    "matmul": _bwd_matmul,
    "tanh": _bwd_tanh,
    "sigmoid": _bwd_sigmoid,
    "exp": _bwd_exp,
    "log": _bwd_log,
    "sum": _bwd_sum,
    "concat": _bwd_concat,
    "select": _bwd_select,
    "softmax": _bwd_softmax,
    "broadcast": _bwd_broadcast,
    "reshape": _bwd_reshape,
}


class Tape:
    """Append-only record of primitive operations with reverse-mode sweep.

    Parameter slots (named leaves) survive ``clear``; they must be re-bound
    with fresh values before the next recording.
    """

    def __init__(self):
        self._kinds = []
        self._parents = []
        self._aux = []
        self._vals = []
        self._needs = []  # True if the node can reach a parameter leaf
        self._slots = {}  # param name -> node index (None when unbound)

    def __len__(self):
        return len(self._vals)

    def _append(self, kind, parents, aux, value, needs):
        idx = len(self._vals)
        self._kinds.append(kind)
        self._parents.append(parents)
        self._aux.append(aux)
        self._vals.append(value)
        self._needs.append(needs)
        return Node(self, idx, value)

    def constant(self, value):
        """A leaf that receives no gradient (detached input)."""
        return self._append("const", (), None, _f64(value), False)

    def param(self, name, value):
        """A named parameter leaf; backward() reports its gradient."""
        if self._slots.get(name) is not None:
            raise ValueError(f"parameter slot {name!r} already bound on this tape")
        node = self._append("param", (), None, _f64(value), True)
        self._slots[name] = node.idx
        return node

    def record(self, kind, operands, aux=None):
        """Append one primitive; computes and caches its forward value."""
        fwd = _FORWARD.get(kind)
        if fwd is None:
            raise ValueError(f"unknown primitive {kind!r}")
        idxs = []
        needs = False
        for op in operands:
            if not isinstance(op, Node) or op.tape is not self:
                raise ValueError(f"{kind}: operand not on this tape")
            idxs.append(op.idx)
            needs = needs or self._needs[op.idx]
        try:
            value = fwd([self._vals[j] for j in idxs], aux)
        except Exception as e:  # shape errors, from numpy or the rule itself
            if isinstance(e, ValueError) and str(e).startswith(f"{kind}:"):
                raise
            shapes = [self._vals[j].shape for j in idxs]
            raise ValueError(f"{kind}: operand shape mismatch {shapes}: {e}") from e
        return self._append(kind, tuple(idxs), aux, value, needs)

    def clear(self):
        """Release all nodes; parameter slots persist unbound."""
        self._kinds.clear()
        self._parents.clear()
        self._aux.clear()
        self._vals.clear()
        self._needs.clear()
        self._slots = {k: None for k in self._slots}

    def backward(self, loss):
        """Gradient of a scalar loss node with respect to every bound parameter.

        Non-parameter leaves receive no entry. Parameters that do not reach
        the loss get exact zeros.
        """
        if not isinstance(loss, Node) or loss.tape is not self:
            raise ValueError("loss is not on this tape")
        if loss.value.ndim != 0:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        n = loss.idx + 1
        grads = [None] * n
        owned = [False] * n
        grads[loss.idx] = np.ones((), dtype=np.float64)
        owned[loss.idx] = True
        needs = self._needs

        def acc(j, contrib, own):
            if not needs[j]:
                return
            cur = grads[j]
            if cur is None:
                grads[j] = contrib
                owned[j] = own
            elif owned[j]:
                # in-place for ndarrays; 0-d results are numpy scalars, which
                # += rebinds instead of mutating, so always write back
                cur += contrib
                grads[j] = cur
            else:
                grads[j] = cur + contrib
                owned[j] = True

        kinds = self._kinds
        parents = self._parents
        aux = self._aux
        vals = self._vals
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            k = kinds[i]
            if k == "const" or k == "param":
                continue
            _BACKWARD[k](g, parents[i], aux[i], vals, i, acc)
        out = {}
        for name, idx in self._slots.items():
            if idx is None:
                continue
            if idx >= n or grads[idx] is None:
                out[name] = np.zeros_like(vals[idx])
            else:
                out[name] = np.asarray(grads[idx])
        return out


# ---------------------------------------------------------------------------
# op helpers
# ---------------------------------------------------------------------------


def add(a, b):
    return a.tape.record("add", (a, b))


def sub(a, b):
    return a.tape.record("sub", (a, b))


def mul(a, b):
    return a.tape.record("mul", (a, b))


def scale(a, c):
    return a.tape.record("scale", (a,), float(c))


def matmul(a, b):
    return a.tape.record("matmul", (a, b))


def tanh(a):
    return a.tape.record("tanh", (a,))


def sigmoid(a):
    return a.tape.record("sigmoid", (a,))


def exp(a):
    return a.tape.record("exp", (a,))


def log(a):
    return a.tape.record("log", (a,))


def reduce_sum(a, axis=None, keepdims=False):
    return a.tape.record("sum", (a,), (axis, keepdims))


def concat(parts, axis=0):
    parts = list(parts)
    return parts[0].tape.record("concat", parts, axis)


def select(a, start, stop):
    """Rows [start:stop] along axis 0 (component selection)."""
    return a.tape.record("select", (a,), (int(start), int(stop)))


def softmax(a, axis):
    """Normalized exponentials across one axis (the set axis)."""
    return a.tape.record("softmax", (a,), axis)


def broadcast(a, shape):
    return a.tape.record("broadcast", (a,), tuple(shape))


def reshape(a, shape):
    return a.tape.record("reshape", (a,), tuple(shape))


def grad_check(fn, params, eps=1e-5):
    """Max relative error between tape gradients and central differences.

    ``fn(tape, bound)`` must build and return a scalar loss Node, where
    ``bound`` maps each name in ``params`` to a bound leaf. The relative
    error for one entry is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    params = {k: _f64(v).copy() for k, v in params.items()}

    def evaluate(pdict, label):
        tape = Tape()
        bound = {k: tape.param(k, v) for k, v in pdict.items()}
        loss = fn(tape, bound)
        v = float(loss.value)
        if not np.isfinite(v):
            raise RuntimeError(f"non-finite forward value at {label}")
        return v, tape, loss

    _, tape, loss = evaluate(params, "base point")
    g_ad = tape.backward(loss)

    worst = 0.0
    for name, base in params.items():
        flat = base.ravel()
        ga = g_ad[name].ravel()
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            fp, _, _ = evaluate(params, f"{name}[{j}]+eps")
            flat[j] = keep - eps
            fm, _, _ = evaluate(params, f"{name}[{j}]-eps")
            flat[j] = keep
            g_fd = (fp - fm) / (2.0 * eps)
            rel = abs(ga[j] - g_fd) / max(1.0, abs(ga[j]), abs(g_fd))
            if rel > worst:
                worst = rel
    return worst
