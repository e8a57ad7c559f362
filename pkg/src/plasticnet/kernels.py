"""Shared update operators for neuron and synapse state vectors.

Every neuron carries a small activation vector h and every directed synapse a
small state vector w. One h-kernel and one w-kernel are shared across the
whole network; per-layer type embeddings make the shared kernels behave
differently per layer. The operator formulas below are written once against a
tiny dispatch facade, so the same code runs on plain float64 arrays and on
tape nodes (for training).

Operators (state s, input x):
  mlp       one hidden tanh layer; output sigmoid when updating h,
            identity when updating w
  mlp-tanh  same, tanh output for both roles
  lstm      s split into (hidden, cell) halves, standard cell update,
            new hidden = o * tanh(c')
  lstm-sig  new hidden = o * sigmoid(c')
  lstm-id   new hidden = o * c'
  gated     a, b = MLP([s, x]); s' = (1 - sigmoid(a)) s
            + sigmoid(a) (tanh(b) + hebb)
"""

from __future__ import annotations

import numpy as np

from . import tape as tp

OP_NAMES = ("mlp", "mlp-tanh", "lstm", "lstm-sig", "lstm-id", "gated")

_LSTM_PHI = {"lstm": "tanh", "lstm-sig": "sigmoid", "lstm-id": "identity"}


# ---------------------------------------------------------------------------
# array/node dispatch
# ---------------------------------------------------------------------------


def _is_node(x):
    return isinstance(x, tp.Node)


def f_tanh(x):
    return tp.tanh(x) if _is_node(x) else np.tanh(x)


def f_sigmoid(x):
    return tp.sigmoid(x) if _is_node(x) else tp.stable_sigmoid(x)


def f_matmul(a, b):
    if _is_node(a):
        return tp.matmul(a, b)
    if b.ndim <= 2:
        return a @ b
    return np.tensordot(a, b, axes=1)


def f_concat(parts, axis=0):
    if _is_node(parts[0]):
        return tp.concat(parts, axis=axis)
    return np.concatenate(parts, axis=axis)


def f_select(x, start, stop):
    return tp.select(x, start, stop) if _is_node(x) else x[start:stop]


def f_sum(x, axis=None, keepdims=False):
    if _is_node(x):
        return tp.reduce_sum(x, axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def f_softmax(x, axis):
    if _is_node(x):
        return tp.softmax(x, axis=axis)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def f_log(x):
    return tp.log(x) if _is_node(x) else np.log(x)


def f_broadcast(x, shape):
    return tp.broadcast(x, shape) if _is_node(x) else np.broadcast_to(x, shape)


def f_reshape(x, shape):
    return tp.reshape(x, shape) if _is_node(x) else np.reshape(x, shape)


def _col(b, ndim):
    """Reshape a bias vector (k,) so it broadcasts over trailing batch axes."""
    if ndim <= 1:
        return b
    shape = (b.shape[0] if _is_node(b) else b.shape[0],) + (1,) * (ndim - 1)
    return f_reshape(b, shape)


# ---------------------------------------------------------------------------
# operator formulas
# ---------------------------------------------------------------------------


def dense_core(params, z):
    """One-hidden-layer network before the output nonlinearity.

    params: W1 (m, k), b1 (m,), W2 (out, m), b2 (out,); z has shape
    (k, *batch). Hidden nonlinearity is tanh.
    """
    h = f_tanh(f_matmul(params["W1"], z) + _col(params["b1"], z.ndim))
    return f_matmul(params["W2"], h) + _col(params["b2"], z.ndim)


def op_mlp(params, s, x, output_nonlinearity="sigmoid"):
    """New state = sigma_out(MLP([s, x])); state and output sizes match."""
    out = dense_core(params, f_concat([s, x], axis=0))
    if output_nonlinearity == "sigmoid":
        return f_sigmoid(out)
    if output_nonlinearity == "tanh":
        return f_tanh(out)
    if output_nonlinearity == "identity":
        return out
    raise ValueError(f"unknown output nonlinearity {output_nonlinearity!r}")


def op_lstm(params, s, x, output_variant="tanh"):
    """Standard cell update on a state split into (hidden, cell) halves.

    params: W (4*half, half + |x|), b (4*half,) with gate blocks ordered
    (input, forget, output, candidate). output_variant picks the final
    hidden = o * phi(c') with phi in {tanh, sigmoid, identity}.
    """
    d = s.shape[0]
    if d % 2 != 0:
        raise ValueError(f"lstm state size must be even, got {d}")
    half = d // 2
    hidden = f_select(s, 0, half)
    cell = f_select(s, half, d)
    z = f_concat([hidden, x], axis=0)
    gates = f_matmul(params["W"], z) + _col(params["b"], z.ndim)
    gi = f_sigmoid(f_select(gates, 0, half))
    gf = f_sigmoid(f_select(gates, half, 2 * half))
    go = f_sigmoid(f_select(gates, 2 * half, 3 * half))
    cand = f_tanh(f_select(gates, 3 * half, 4 * half))
    c_new = gf * cell + gi * cand
    if output_variant == "tanh":
        h_new = go * f_tanh(c_new)
    elif output_variant == "sigmoid":
        h_new = go * f_sigmoid(c_new)
    elif output_variant == "identity":
        h_new = go * c_new
    else:
        raise ValueError(f"unknown lstm output variant {output_variant!r}")
    return f_concat([h_new, c_new], axis=0)


def op_gated(params, s, x, hebb=None):
    """Convex-combination update s' = (1-g) s + g (r + hebb).

    a, b come from one MLP with output size 2|s|; g = sigmoid(a),
    r = tanh(b). hebb is the pre/post product term for synapse updates and
    None (treated as zero) for neuron updates.
    """
    d = s.shape[0]
    ab = dense_core(params, f_concat([s, x], axis=0))
    if ab.shape[0] != 2 * d:
        raise ValueError(f"gated MLP output rows {ab.shape[0]} != 2*|s| = {2 * d}")
    g = f_sigmoid(f_select(ab, 0, d))
    r = f_tanh(f_select(ab, d, 2 * d))
    if hebb is not None:
        r = r + hebb
    return (1.0 - g) * s + g * r


def synapse_effect(w, h_j):
    """Effect of one synapse on its target: every w component times the
    source neuron's component 0 (pre-update w)."""
    return w * h_j[0]


def synapse_input_vector(h_i, h_j, u_ij, e_i, e_j):
    """Per-synapse kernel input [h_i, h_j, u_ij, h_i * h_j[1], e_i, e_j]."""
    return np.concatenate([h_i, h_j, u_ij, h_i * h_j[1], e_i, e_j])


def integrate(u_list, dim=None):
    """Sum incoming synapse effects; empty input gives zeros(dim)."""
    u_list = list(u_list)
    if not u_list:
        if dim is None:
            raise ValueError("integrate: empty input needs an explicit dim")
        return np.zeros(dim)
    out = u_list[0]
    for u in u_list[1:]:
        out = out + u
    return out


class Kernel:
    """One update operator bound to a role and fixed dimensions.

    role "h" updates neuron states (input x = [u_i, e_i]) and role "w"
    updates synapse states (input x = the synapse input vector). Parameters
    are a name->array dict shared by every neuron/synapse; their count is
    independent of how many neurons or synapses exist.
    """

    def __init__(self, op, state_dim, input_dim, hidden_dim, role):
        if op not in OP_NAMES:
            raise ValueError(f"unknown operator {op!r}, expected one of {OP_NAMES}")
        if role not in ("h", "w"):
            raise ValueError(f"role must be 'h' or 'w', got {role!r}")
        if op in _LSTM_PHI and state_dim % 2 != 0:
            raise ValueError(f"{op} needs an even state size, got {state_dim} for role {role!r}")
        self.op = op
        self.role = role
        self.state_dim = state_dim
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        if op in ("mlp", "mlp-tanh"):
            self.output_nonlinearity = "tanh" if op == "mlp-tanh" else ("sigmoid" if role == "h" else "identity")

    def param_shapes(self):
        d, k, m = self.state_dim, self.input_dim, self.hidden_dim
        if self.op in ("mlp", "mlp-tanh"):
            return {"W1": (m, d + k), "b1": (m,), "W2": (d, m), "b2": (d,)}
        if self.op == "gated":
            return {"W1": (m, d + k), "b1": (m,), "W2": (2 * d, m), "b2": (2 * d,)}
        half = d // 2
        return {"W": (4 * half, half + k), "b": (4 * half,)}

    def param_count(self):
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def init_params(self, rng):
        """Dense layers uniform in +-sqrt(6/(fan_in+fan_out)); biases zero
        except the LSTM forget-gate block at +1."""
        out = {}
        for name, shape in self.param_shapes().items():
            if len(shape) == 2:
                out[name] = glorot(rng, shape)
            else:
                out[name] = np.zeros(shape)
        if self.op in _LSTM_PHI:
            half = self.state_dim // 2
            out["b"][half:2 * half] = 1.0
        return out

    def apply(self, params, s, x, hebb=None):
        """Advance one state (or a batch laid out as (dim, *batch))."""
        if self.op in ("mlp", "mlp-tanh"):
            return op_mlp(params, s, x, self.output_nonlinearity)
        if self.op == "gated":
            return op_gated(params, s, x, hebb=hebb)
        return op_lstm(params, s, x, _LSTM_PHI[self.op])


def glorot(rng, shape):
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def neuron_update(kernel, params, h, u_i, e_i):
    """New neuron state from the integrated input; hebb term is zero here."""
    x = f_concat([u_i, e_i], axis=0)
    return kernel.apply(params, h, x, hebb=None)


def synapse_update(kernel, params, w, x_ij, hebb):
    """New synapse state; the gated operator receives the hebb product."""
    return kernel.apply(params, w, x_ij, hebb=hebb if kernel.op == "gated" else None)
