"""Layered plastic network driven entirely by local update rules.

Layers are fully inter-connected, including self-connections. Hidden layers
are processed first (in configuration order) and the input layer last; a
layer being processed reads the already-updated activations of earlier layers
and the previous-step activations of itself and later layers. Per processed
layer: synapse effects from the pre-update synapse states, synapse updates,
effect integration, then the neuron update.

The input layer implements prediction: a per-neuron MLP produces d_h values,
each component is softmax-normalized across the alphabet's neurons, component
0 is read as the next-symbol probability, and after the cross-entropy loss
the true one-hot symbol replaces component 0 while the prediction error
replaces the last component. Input symbols enter the network only through
this substitution.

Synapse states are batched as one (d_w, n_dst, N_total) tensor per target
layer, so a step costs a handful of array ops regardless of neuron counts.
The same stepping code runs on plain arrays or on a gradient tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .kernels import (
    Kernel,
    dense_core,
    f_broadcast,
    f_concat,
    f_log,
    f_reshape,
    f_select,
    f_softmax,
    f_sum,
    glorot,
)

__all__ = [
    "NetworkConfig",
    "MetaParams",
    "NetworkState",
    "StepOutput",
    "Network",
    "meta_param_count",
    "init_state",
    "reset_activations",
]


@dataclass(frozen=True)
class NetworkConfig:
    """Shapes and operator choices; neuron counts never affect parameters."""

    hidden: tuple = (8,)
    d_h: int = 6
    d_w: int = 6
    d_e: int = 4
    m: int = 16
    h_op: str = "gated"
    w_op: str = "gated"
    alphabet: int = 27

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(n) for n in self.hidden))
        if self.d_h < 2:
            raise ValueError(f"d_h must be >= 2 (reserved components), got {self.d_h}")
        if self.d_w < 1:
            raise ValueError(f"d_w must be >= 1, got {self.d_w}")
        if any(n < 1 for n in self.hidden):
            raise ValueError(f"hidden layer sizes must be positive, got {self.hidden}")
        if self.alphabet < 2:
            raise ValueError(f"alphabet must have at least 2 symbols, got {self.alphabet}")
        if self.w_op == "gated" and self.d_w != self.d_h:
            raise ValueError(
                f"gated synapse updates add the h_i*h_j[1] term to the state, which needs d_w == d_h; got d_w={self.d_w}, d_h={self.d_h}"
            )
        # validate operator/state compatibility eagerly
        self.kernels()

    @property
    def layer_sizes(self):
        """Processing order: hidden layers first, input layer last."""
        return self.hidden + (self.alphabet,)

    @property
    def n_layers(self):
        return len(self.hidden) + 1

    @property
    def input_layer(self):
        return self.n_layers - 1

    @property
    def total_neurons(self):
        return sum(self.layer_sizes)

    @property
    def synapse_input_dim(self):
        return 3 * self.d_h + self.d_w + 2 * self.d_e

    def kernels(self):
        w_kernel = Kernel(self.w_op, self.d_w, self.synapse_input_dim, self.m, "w")
        h_kernel = Kernel(self.h_op, self.d_h, self.d_w + self.d_e, self.m, "h")
        return w_kernel, h_kernel

    def to_dict(self):
        return {
            "hidden": list(self.hidden),
            "d_h": self.d_h,
            "d_w": self.d_w,
            "d_e": self.d_e,
            "m": self.m,
            "h_op": self.h_op,
            "w_op": self.w_op,
            "alphabet": self.alphabet,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", ()))
        return cls(**d)


def _kernel_param_count(op, d, k, m):
    """Closed-form parameter count of one operator (no enumeration)."""
    if op in ("mlp", "mlp-tanh"):
        return m * (d + k) + m + d * m + d
    if op == "gated":
        return m * (d + k) + m + 2 * d * m + 2 * d
    half = d // 2
    return 4 * half * (half + k) + 4 * half


def meta_param_count(cfg):
    """Exact count of backprop-trained parameters.

    Depends only on state sizes, embedding size, kernel width, operator
    choices and the number of layer types -- not on neuron counts.
    """
    k_in = cfg.d_h + cfg.d_w + cfg.d_e
    input_mlp = cfg.m * k_in + cfg.m + cfg.d_h * cfg.m + cfg.d_h
    return (
        _kernel_param_count(cfg.w_op, cfg.d_w, cfg.synapse_input_dim, cfg.m)
        + _kernel_param_count(cfg.h_op, cfg.d_h, cfg.d_w + cfg.d_e, cfg.m)
        + input_mlp
        + cfg.n_layers * cfg.d_e
    )


class MetaParams:
    """All backprop-trained parameters: two kernels, the input-layer MLP and
    one embedding row per layer type. Stored as an ordered name->array dict;
    the flat vector view is what the optimizer updates."""

    def __init__(self, cfg, arrays):
        self.cfg = cfg
        self.arrays = dict(arrays)

    @classmethod
    def create(cls, cfg, rng):
        w_kernel, h_kernel = cfg.kernels()
        arrays = {}
        for name, val in w_kernel.init_params(rng).items():
            arrays[f"wk/{name}"] = val
        for name, val in h_kernel.init_params(rng).items():
            arrays[f"hk/{name}"] = val
        k_in = cfg.d_h + cfg.d_w + cfg.d_e
        arrays["in/W1"] = glorot(rng, (cfg.m, k_in))
        arrays["in/b1"] = np.zeros(cfg.m)
        arrays["in/W2"] = glorot(rng, (cfg.d_h, cfg.m))
        arrays["in/b2"] = np.zeros(cfg.d_h)
        arrays["embed"] = rng.standard_normal((cfg.n_layers, cfg.d_e))
        return cls(cfg, arrays)

    @property
    def count(self):
        return sum(a.size for a in self.arrays.values())

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def set_flat(self, vec):
        ofs = 0
        for a in self.arrays.values():
            a[...] = vec[ofs:ofs + a.size].reshape(a.shape)
            ofs += a.size
        if ofs != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {ofs}")

    def flatten_grads(self, grads):
        return np.concatenate([grads[name].ravel() for name in self.arrays])

    def bind(self, tape):
        return {name: tape.param(name, val) for name, val in self.arrays.items()}

    def copy(self):
        return MetaParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})


@dataclass
class NetworkState:
    """Runtime state: one activation matrix per layer (d_h, n) and one
    synapse tensor per target layer (d_w, n_dst, N_total)."""

    h: list
    w: list

    def copy(self):
        return NetworkState([a.copy() for a in self.h], [a.copy() for a in self.w])

    def finite(self):
        return all(np.isfinite(a).all() for a in self.h) and all(np.isfinite(a).all() for a in self.w)


@dataclass
class StepOutput:
    p: np.ndarray
    loss: float


def init_state(cfg, seed_or_rng):
    """Zero activations; synapse components ~ N(0, 1/fan_in) with fan_in the
    source layer's neuron count."""
    rng = np.random.default_rng(seed_or_rng) if not isinstance(seed_or_rng, np.random.Generator) else seed_or_rng
    sizes = cfg.layer_sizes
    h = [np.zeros((cfg.d_h, n)) for n in sizes]
    w = []
    for n_dst in sizes:
        blocks = [rng.normal(0.0, 1.0 / np.sqrt(n_src), size=(cfg.d_w, n_dst, n_src)) for n_src in sizes]
        w.append(np.concatenate(blocks, axis=2))
    return NetworkState(h, w)


def reset_activations(state):
    """Zero every activation in place; synapse states untouched."""
    for a in state.h:
        a[...] = 0.0
    return state


def _cat(parts, axis):
    return parts[0] if len(parts) == 1 else f_concat(parts, axis=axis)


class StepContext:
    """Parameters bound for stepping, plus cached embedding broadcasts.

    In taped mode the caches are nodes on the segment's tape, so a context
    lives for exactly one recorded segment. In plain mode it can be reused
    as long as the parameter arrays are not replaced.
    """

    def __init__(self, cfg, bound, tape=None):
        self.cfg = cfg
        self.tape = tape
        self.w_kernel, self.h_kernel = cfg.kernels()
        self.wk = {k.split("/", 1)[1]: v for k, v in bound.items() if k.startswith("wk/")}
        self.hk = {k.split("/", 1)[1]: v for k, v in bound.items() if k.startswith("hk/")}
        self.inp = {k.split("/", 1)[1]: v for k, v in bound.items() if k.startswith("in/")}
        embed = bound["embed"]
        sizes = cfg.layer_sizes
        N = cfg.total_neurons
        d_e = cfg.d_e
        rows = [f_reshape(f_select(embed, i, i + 1), (d_e, 1, 1)) for i in range(cfg.n_layers)]
        self.e_dst = []  # (d_e, n_dst, N) per layer: this layer's embedding
        self.e_src = []  # (d_e, n_dst, N) per layer: source embeddings by column
        self.e_flat = []  # (d_e, n) per layer, for the neuron update input
        for ell, n_dst in enumerate(sizes):
            self.e_dst.append(f_broadcast(rows[ell], (d_e, n_dst, N)))
            self.e_src.append(
                _cat([f_broadcast(rows[s], (d_e, n_dst, sizes[s])) for s in range(cfg.n_layers)], axis=2)
            )
            self.e_flat.append(f_broadcast(f_reshape(rows[ell], (d_e, 1)), (d_e, n_dst)))

    def const(self, value):
        return self.tape.constant(value) if self.tape is not None else np.asarray(value, dtype=np.float64)

    def zero_activations(self):
        return [self.const(np.zeros((self.cfg.d_h, n))) for n in self.cfg.layer_sizes]

    def lift_state(self, state):
        """Bring a detached NetworkState onto this context as constants."""
        return [self.const(a) for a in state.h], [self.const(a) for a in state.w]

    def step(self, H, W, target):
        """One global update; returns (H', W', loss, p_row).

        H and W are lists (per layer) of arrays or nodes; target is the
        symbol index to predict this step.
        """
        cfg = self.cfg
        sizes = cfg.layer_sizes
        L = cfg.n_layers
        N = cfg.total_neurons
        d_h, d_w = cfg.d_h, cfg.d_w
        A = cfg.alphabet
        if not (0 <= target < A):
            raise ValueError(f"target {target} outside alphabet [0, {A})")
        H = list(H)
        W = list(W)
        loss = None
        p_row = None
        for ell in range(L):
            n_d = sizes[ell]
            h0 = _cat([f_select(H[s], 0, 1) for s in range(L)], axis=1)
            h1 = _cat([f_select(H[s], 1, 2) for s in range(L)], axis=1)
            h_all = _cat(H, axis=1)
            u = W[ell] * f_reshape(h0, (1, 1, N))
            h_i_col = f_reshape(H[ell], (d_h, n_d, 1))
            hebb = h_i_col * f_reshape(h1, (1, 1, N))
            x = f_concat(
                [
                    f_broadcast(h_i_col, (d_h, n_d, N)),
                    f_broadcast(f_reshape(h_all, (d_h, 1, N)), (d_h, n_d, N)),
                    u,
                    hebb,
                    self.e_dst[ell],
                    self.e_src[ell],
                ],
                axis=0,
            )
            W[ell] = self.w_kernel.apply(self.wk, W[ell], x, hebb=hebb)
            u_i = f_sum(u, axis=2)
            if ell == cfg.input_layer:
                z = f_concat([H[ell], u_i, self.e_flat[ell]], axis=0)
                v = dense_core(self.inp, z)
                s = f_softmax(v, axis=1)
                p_row = f_select(s, 0, 1)
                y = np.zeros((1, A))
                y[0, target] = 1.0
                y = self.const(y)
                loss = -f_sum(y * f_log(p_row))
                err = y - p_row
                parts = [y] + ([f_select(s, 1, d_h - 1)] if d_h > 2 else []) + [err]
                H[ell] = f_concat(parts, axis=0)
            else:
                x_n = f_concat([u_i, self.e_flat[ell]], axis=0)
                H[ell] = self.h_kernel.apply(self.hk, H[ell], x_n, hebb=None)
        return H, W, loss, p_row


class Network:
    """Config plus meta-parameters. Runtime state lives outside and is passed
    through step calls; one state must only ever be advanced by one run."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg, rng):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        return cls(cfg, MetaParams.create(cfg, rng))

    def init_state(self, seed_or_rng):
        return init_state(self.cfg, seed_or_rng)

    def plain_context(self):
        return StepContext(self.cfg, self.params.arrays, tape=None)

    def segment_context(self, tape):
        """Bind parameters onto a (cleared) tape for recording one segment."""
        return StepContext(self.cfg, self.params.bind(tape), tape=tape)

    def step(self, state, target, record=None):
        """Advance one step. With a tape in `record`, states enter as
        constants and the returned StepOutput carries detached values."""
        ctx = self.segment_context(record) if record is not None else self.plain_context()
        H, W = ctx.lift_state(state)
        H, W, loss, p_row = ctx.step(H, W, target)
        if record is not None:
            new_state = NetworkState([n.value for n in H], [n.value for n in W])
            out = StepOutput(p=np.asarray(p_row.value).ravel().copy(), loss=float(loss.value))
        else:
            new_state = NetworkState(list(H), list(W))
            out = StepOutput(p=np.asarray(p_row).ravel().copy(), loss=float(loss))
        if not np.isfinite(out.loss):
            raise RuntimeError(f"non-finite loss at step (target={target})")
        return new_state, out
