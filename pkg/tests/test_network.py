"""Network stepping vs the flat per-synapse oracle, plus state/param rules."""

import itertools

import numpy as np
import pytest

from plasticnet import checkpoint as ck
from plasticnet import tape as tp
from plasticnet.kernels import OP_NAMES
from plasticnet.network import (
    MetaParams,
    Network,
    NetworkConfig,
    init_state,
    meta_param_count,
    reset_activations,
)

from oracles import flat_step_oracle

LN27 = float(np.log(27.0))


def toy_cfg(**kw):
    base = dict(hidden=(3,), d_h=4, d_w=4, d_e=2, m=4, h_op="gated", w_op="gated")
    base.update(kw)
    return NetworkConfig(**base)


def random_net(cfg, seed=0):
    net = Network.create(cfg, np.random.default_rng(seed))
    state = net.init_state(np.random.default_rng(seed + 1))
    return net, state


def randomized_state(cfg, rng):
    state = init_state(cfg, rng)
    for a in state.h:
        a[...] = rng.standard_normal(a.shape) * 0.5
    return state


# ---------------------------------------------------------------------------
# init_state
# ---------------------------------------------------------------------------


def test_init_state_zero_activations_and_seeded():
    cfg = toy_cfg()
    s1 = init_state(cfg, 42)
    s2 = init_state(cfg, 42)
    for a in s1.h:
        assert not a.any()
    for a, b in zip(s1.w + s1.h, s2.w + s2.h):
        assert np.array_equal(a, b)
    s3 = init_state(cfg, 43)
    assert any(not np.array_equal(a, b) for a, b in zip(s1.w, s3.w))


def test_init_state_weight_std_tracks_source_fan_in():
    cfg = NetworkConfig(hidden=(16, 16), d_h=8, d_w=8, d_e=2, m=4, h_op="mlp", w_op="mlp")
    state = init_state(cfg, 0)
    sizes = cfg.layer_sizes
    # columns belonging to the 27-neuron input layer as source
    start = sizes[0] + sizes[1]
    samples = np.concatenate([w[:, :, start:].ravel() for w in state.w])
    assert samples.size >= 10_000
    want = 1.0 / np.sqrt(27.0)
    assert abs(samples.std() - want) / want < 0.20
    # and the 16-neuron layers as source
    samples16 = np.concatenate([w[:, :, :start].ravel() for w in state.w])
    want16 = 1.0 / np.sqrt(16.0)
    assert abs(samples16.std() - want16) / want16 < 0.20


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def test_first_step_uniform_prediction_without_hidden_layers():
    # zero activations and no earlier layers: all input-layer MLP inputs are
    # identical, so the prediction is exactly uniform
    cfg = toy_cfg(hidden=())
    net, state = random_net(cfg)
    _, out = net.step(state, target=5)
    np.testing.assert_allclose(out.p, 1.0 / 27.0, atol=1e-15)
    assert out.loss == pytest.approx(LN27, abs=1e-12)


def test_probabilities_sum_to_one_every_step():
    net, state = random_net(toy_cfg())
    rng = np.random.default_rng(3)
    for _ in range(20):
        state, out = net.step(state, int(rng.integers(27)))
        assert abs(out.p.sum() - 1.0) < 1e-12
        assert (out.p >= 0).all()
        assert out.loss >= 0.0


def test_substitution_writes_target_and_error():
    cfg = toy_cfg()
    net, state = random_net(cfg)
    target = 11
    new_state, out = net.step(state, target)
    h_in = new_state.h[cfg.input_layer]
    one_hot = np.zeros(27)
    one_hot[target] = 1.0
    np.testing.assert_array_equal(h_in[0], one_hot)
    np.testing.assert_array_equal(h_in[cfg.d_h - 1], one_hot - out.p)
    assert abs(h_in[cfg.d_h - 1].sum()) < 1e-12  # both rows sum to 1


def test_step_determinism_bit_identical():
    net, state = random_net(toy_cfg())
    a, oa = net.step(state.copy(), 7)
    b, ob = net.step(state.copy(), 7)
    for x, y in zip(a.h + a.w, b.h + b.w):
        assert np.array_equal(x, y)
    assert oa.loss == ob.loss


def test_state_erasing_w_op():
    # identity-output MLP with zero parameters maps every synapse state to 0:
    # such a network cannot carry information across steps in its weights
    cfg = toy_cfg(w_op="mlp", h_op="mlp")
    net, state = random_net(cfg)
    for name, arr in net.params.arrays.items():
        if name.startswith("wk/"):
            arr[...] = 0.0
    new_state, _ = net.step(state, 3)
    for w in new_state.w:
        assert not w.any()


def test_taped_step_matches_plain():
    cfg = toy_cfg()
    net, state = random_net(cfg)
    state = randomized_state(cfg, np.random.default_rng(5))
    plain_state, plain_out = net.step(state.copy(), 9)
    tape = tp.Tape()
    taped_state, taped_out = net.step(state.copy(), 9, record=tape)
    assert taped_out.loss == pytest.approx(plain_out.loss, abs=1e-14)
    for x, y in zip(plain_state.h + plain_state.w, taped_state.h + taped_state.w):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-14)


def test_invalid_target_rejected():
    net, state = random_net(toy_cfg())
    with pytest.raises(ValueError, match="alphabet"):
        net.step(state, 27)


# ---------------------------------------------------------------------------
# oracle equivalence: full step vs straight-line reimplementation
# ---------------------------------------------------------------------------


def _one_instance(h_op, w_op, seed):
    cfg = toy_cfg(h_op=h_op, w_op=w_op)
    rng = np.random.default_rng(seed)
    net = Network.create(cfg, rng)
    state = randomized_state(cfg, rng)
    target = int(rng.integers(27))
    got_state, got = net.step(state.copy(), target)
    H, W, loss, p = flat_step_oracle(cfg, net.params.arrays, state.h, state.w, target)
    assert got.loss == pytest.approx(loss, abs=1e-12)
    np.testing.assert_allclose(got.p, p, rtol=0, atol=1e-12)
    for a, b in zip(got_state.h, H):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    for a, b in zip(got_state.w, W):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@pytest.mark.parametrize("h_op,w_op", list(itertools.product(OP_NAMES, OP_NAMES)))
def test_full_step_matches_flat_oracle(h_op, w_op):
    _one_instance(h_op, w_op, seed=hash((h_op, w_op)) % 10_000)
    _one_instance(h_op, w_op, seed=hash((w_op, h_op, 1)) % 10_000)


def test_full_step_oracle_extra_instances():
    # top up to >= 100 random instances overall (36 pairs x 2 above = 72)
    for seed in range(28):
        _one_instance("gated", "gated", seed=2_000 + seed)


def test_two_step_trajectory_matches_oracle():
    cfg = toy_cfg(h_op="lstm-id", w_op="gated")
    rng = np.random.default_rng(77)
    net = Network.create(cfg, rng)
    state = randomized_state(cfg, rng)
    oh, ow = [a.copy() for a in state.h], [a.copy() for a in state.w]
    for target in (4, 19):
        state, out = net.step(state, target)
        oh, ow, oloss, _ = flat_step_oracle(cfg, net.params.arrays, oh, ow, target)
        assert out.loss == pytest.approx(oloss, abs=1e-12)
    for a, b in zip(state.h + state.w, oh + ow):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# reset / counting / checkpoint
# ---------------------------------------------------------------------------


def test_reset_activations_clears_h_keeps_w():
    cfg = toy_cfg()
    net, state = random_net(cfg)
    state, _ = net.step(state, 2)
    w_before = [w.copy() for w in state.w]
    out = reset_activations(state)
    assert out is state
    for a in state.h:
        assert not a.any()
    for w, before in zip(state.w, w_before):
        assert np.array_equal(w, before)


def test_step_reset_step_clone_equality():
    cfg = toy_cfg()
    net, state = random_net(cfg)
    state, _ = net.step(state, 2)
    c1 = reset_activations(state.copy())
    c2 = reset_activations(state.copy())
    s1, o1 = net.step(c1, 13)
    s2, o2 = net.step(c2, 13)
    assert o1.loss == o2.loss
    for a, b in zip(s1.h + s1.w, s2.h + s2.w):
        assert np.array_equal(a, b)


def test_meta_param_count_independent_of_neuron_counts():
    base = meta_param_count(toy_cfg(hidden=(8,)))
    assert meta_param_count(toy_cfg(hidden=(16,))) == base
    assert meta_param_count(toy_cfg(hidden=(64,))) == base


def test_meta_param_count_grows_by_embedding_per_layer():
    cfg1, cfg2 = toy_cfg(hidden=(8,)), toy_cfg(hidden=(8, 8))
    assert meta_param_count(cfg2) - meta_param_count(cfg1) == cfg1.d_e


@pytest.mark.parametrize("h_op", OP_NAMES)
@pytest.mark.parametrize("w_op", OP_NAMES)
def test_meta_param_count_matches_leaf_enumeration(h_op, w_op):
    cfg = toy_cfg(h_op=h_op, w_op=w_op)
    params = MetaParams.create(cfg, np.random.default_rng(0))
    assert meta_param_count(cfg) == params.count
    assert meta_param_count(cfg) == sum(a.size for a in params.arrays.values())


def test_flat_roundtrip():
    cfg = toy_cfg()
    params = MetaParams.create(cfg, np.random.default_rng(0))
    vec = params.flat()
    clone = MetaParams.create(cfg, np.random.default_rng(9))
    clone.set_flat(vec)
    for k in params.arrays:
        assert np.array_equal(params.arrays[k], clone.arrays[k])


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = toy_cfg()
    net, state = random_net(cfg)
    state, _ = net.step(state, 3)
    rng = np.random.default_rng(123)
    rng.integers(100)  # advance
    path = tmp_path / "ck.bin"
    ck.save_checkpoint(path, cfg, net.params, state, rng.bit_generator.state, step=770)
    cfg2, params2, state2, rng_state2, step2 = ck.load_checkpoint(path)
    assert cfg2 == cfg
    assert step2 == 770
    for k in net.params.arrays:
        assert np.array_equal(net.params.arrays[k], params2.arrays[k])
    for a, b in zip(state.h + state.w, state2.h + state2.w):
        assert np.array_equal(a, b)
    assert rng_state2 == rng.bit_generator.state


def test_checkpoint_rng_state_resumes_stream(tmp_path):
    cfg = toy_cfg()
    net, state = random_net(cfg)
    rng = np.random.default_rng(5)
    rng.integers(10, size=7)
    path = tmp_path / "ck.bin"
    ck.save_checkpoint(path, cfg, net.params, state, rng.bit_generator.state, step=0)
    _, _, _, rng_state, _ = ck.load_checkpoint(path)
    resumed = np.random.default_rng(0)
    resumed.bit_generator.state = rng_state
    assert list(resumed.integers(10, size=5)) == list(rng.integers(10, size=5))


def test_checkpoint_bytes_deterministic(tmp_path):
    cfg = toy_cfg()
    net, state = random_net(cfg)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    st = np.random.default_rng(9).bit_generator.state
    ck.save_checkpoint(p1, cfg, net.params, state, st, step=5)
    ck.save_checkpoint(p2, cfg, net.params, state, st, step=5)
    assert p1.read_bytes() == p2.read_bytes()


def test_config_validation():
    with pytest.raises(ValueError, match="d_h"):
        NetworkConfig(d_h=1)
    with pytest.raises(ValueError, match="even"):
        NetworkConfig(d_h=5, d_w=5, h_op="lstm", w_op="mlp")
    with pytest.raises(ValueError, match="d_w == d_h"):
        NetworkConfig(d_h=4, d_w=6, h_op="mlp", w_op="gated")
