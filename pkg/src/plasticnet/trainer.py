"""Training the update rules by remembering past snippets.

The stream advances T characters at a time. Each segment records, on one
tape: the T online steps continuing from the detached incoming state, then a
replay branch that restarts from zero activations but shares the online
branch's end-of-segment synapse states, predicting T characters from a past
position t_p drawn uniformly from [max(0, t-P), t-T] with P = T + delay.
Backprop of the replay loss runs through all 2T steps into the
meta-parameters; the incoming state is a constant, so gradients never cross
segment boundaries. Only the replay loss is optimized by default; the online
loss is a diagnostic (a config switch can add it to the objective).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ck
from .network import Network, NetworkState, init_state
from .tape import Tape

CSV_HEADER = "step,loss_past,loss_online,delay,seed,wall_ms"


@dataclass(frozen=True)
class TrainConfig:
    T: int = 10
    delay: int = 10
    steps: int = 150_000
    lr: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    objective: str = "past"  # "past" or "past+online"
    checkpoint_every: int = 50_000
    finite_check_every: int = 100  # steps between full state checks

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.delay < 0:
            raise ValueError(f"delay must be >= 0, got {self.delay}")
        if self.objective not in ("past", "past+online"):
            raise ValueError(f"objective must be 'past' or 'past+online', got {self.objective!r}")

    @property
    def P(self):
        return self.T + self.delay


class Adam:
    """Adaptive-moment update with bias correction."""

    def __init__(self, dim, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, theta, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def sample_past(t, T, P, rng):
    """Snippet start: uniform integer in [max(0, t-P), t-T]."""
    if t < T:
        raise ValueError(f"need t >= T, got t={t}, T={T}")
    lo = max(0, t - P)
    hi = t - T
    return int(rng.integers(lo, hi + 1))


@dataclass
class SegmentResult:
    loss_past: float
    loss_online: float
    grads: dict | None
    end_state: NetworkState


def _mean(nodes):
    total = nodes[0]
    for x in nodes[1:]:
        total = total + x
    return total * (1.0 / len(nodes))


def run_segment(net, state, online_targets, past_targets, objective="past", tape=None, want_grads=True):
    """Record one 2T-step segment and (optionally) its gradients.

    The returned end state is the detached online state; the replay branch
    shares the online synapse nodes, so its loss reaches the meta-parameters
    through both branches.
    """
    if tape is None:
        tape = Tape()
    tape.clear()
    ctx = net.segment_context(tape)
    H, W = ctx.lift_state(state)
    on_losses = []
    for y in online_targets:
        H, W, loss, _ = ctx.step(H, W, int(y))
        on_losses.append(loss)
    loss_on = _mean(on_losses)
    Hp = ctx.zero_activations()
    Wp = W
    p_losses = []
    for y in past_targets:
        Hp, Wp, loss, _ = ctx.step(Hp, Wp, int(y))
        p_losses.append(loss)
    loss_p = _mean(p_losses)
    grads = None
    if want_grads:
        target = loss_p if objective == "past" else loss_p + loss_on
        grads = tape.backward(target)
    end_state = NetworkState([n.value for n in H], [n.value for n in W])
    return SegmentResult(float(loss_p.value), float(loss_on.value), grads, end_state)


class RememberTrainer:
    """Owns one run: network, stream position, optimizer and snippet RNG.

    Seed derivation is fixed so that runs are reproducible and the snippet
    index sequence depends only on (seed, segment index) -- the LSTM baseline
    derives its snippet RNG identically, which makes the two models directly
    comparable under equal seeds.
    """

    def __init__(self, net_cfg, train_cfg, stream):
        self.cfg = train_cfg
        self.stream = stream
        self.net = Network.create(net_cfg, np.random.default_rng([train_cfg.seed, 1]))
        self.state = init_state(net_cfg, np.random.default_rng([train_cfg.seed, 2]))
        self.snippet_rng = np.random.default_rng([train_cfg.seed, 3])
        self.adam = Adam(self.net.params.count, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
        self.tape = Tape()
        self.t = train_cfg.T

    def train_segment(self):
        """One online+replay segment plus an optimizer step; advances t by T."""
        cfg = self.cfg
        T = cfg.T
        t = self.t
        online_targets = self.stream.window(t - T + 1, T)
        t_p = sample_past(t, T, cfg.P, self.snippet_rng)
        past_targets = self.stream.window(t_p, T)
        res = run_segment(self.net, self.state, online_targets, past_targets, cfg.objective, tape=self.tape)
        if not (np.isfinite(res.loss_past) and np.isfinite(res.loss_online)):
            raise RuntimeError(f"non-finite loss at step {t} (loss_past={res.loss_past}, loss_online={res.loss_online})")
        g = self.net.params.flatten_grads(res.grads)
        if not np.isfinite(g).all():
            bad = [n for n, a in res.grads.items() if not np.isfinite(a).all()]
            raise RuntimeError(f"non-finite gradient at step {t} in {bad}")
        self.net.params.set_flat(self.adam.step(self.net.params.flat(), g, cfg.lr))
        self.state = res.end_state
        self.t = t + T
        return {"step": t, "loss_past": res.loss_past, "loss_online": res.loss_online, "t_p": t_p}

    def save_checkpoint(self, path):
        ck.save_checkpoint(
            path, self.net.cfg, self.net.params, self.state, self.snippet_rng.bit_generator.state, self.t
        )

    def run(self, metrics_path=None, checkpoint_path=None, n_steps=None):
        """Loop segments over the stream; returns the metric rows.

        Writes one CSV row per segment when metrics_path is given, and a
        checkpoint every cfg.checkpoint_every steps (plus a final one, and a
        diagnostics one on abort) when checkpoint_path is given.
        """
        cfg = self.cfg
        total = cfg.steps if n_steps is None else n_steps
        n_segments = total // cfg.T
        check_segments = max(1, cfg.finite_check_every // cfg.T)
        rows = []
        fh = open(metrics_path, "w") if metrics_path else None
        if fh:
            fh.write(CSV_HEADER + "\n")
        try:
            for k in range(n_segments):
                t0 = time.perf_counter()
                try:
                    m = self.train_segment()
                except RuntimeError:
                    if checkpoint_path:
                        self.save_checkpoint(str(checkpoint_path) + ".abort")
                    raise
                if (k + 1) % check_segments == 0 and not self.state.finite():
                    if checkpoint_path:
                        self.save_checkpoint(str(checkpoint_path) + ".abort")
                    raise RuntimeError(f"non-finite network state at step {m['step']}")
                m["wall_ms"] = (time.perf_counter() - t0) * 1000.0
                rows.append(m)
                if fh:
                    fh.write(
                        f"{m['step']},{m['loss_past']!r},{m['loss_online']!r},{cfg.delay},{cfg.seed},{m['wall_ms']:.3f}\n"
                    )
                if checkpoint_path and cfg.checkpoint_every and (k + 1) * cfg.T % cfg.checkpoint_every == 0:
                    self.save_checkpoint(checkpoint_path)
            if checkpoint_path:
                self.save_checkpoint(checkpoint_path)
        finally:
            if fh:
                fh.close()
        return rows


def run_training(net_cfg, train_cfg, stream, metrics_path=None, checkpoint_path=None):
    """Convenience wrapper: build a trainer and run it to cfg.steps."""
    trainer = RememberTrainer(net_cfg, train_cfg, stream)
    rows = trainer.run(metrics_path=metrics_path, checkpoint_path=checkpoint_path)
    return trainer, rows
