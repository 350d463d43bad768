import math

import numpy as np
import pytest

from conftest import small_config, tiny_config
from delaysnn.errors import DatasetError, DimensionError, StateError
from delaysnn.network import BatchNormState, init_net
from delaysnn.trainer import (AdamState, adam_step, backward_pass, batchnorm_forward,
                              cross_entropy, dropout_forward, forward_pass, loss, schedule_lr,
                              train)
from oracles import gradient_check


# -- batch norm and dropout ---------------------------------------------------------

def test_batchnorm_constant_channel_maps_to_zero():
    x = np.full((4, 5, 3), 2.5)
    y, x_hat = batchnorm_forward(x, BatchNormState.fresh(3, np.float64), training=True)
    assert np.all(x_hat == 0) and np.all(y == 0)


def test_batchnorm_training_moments():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, size=(8, 20, 4))
    y, _ = batchnorm_forward(x, BatchNormState.fresh(4, np.float64), training=True)
    np.testing.assert_allclose(y.mean(axis=(0, 1)), 0.0, atol=1e-12)
    # biased variance of the output is var / (var + eps)
    var = x.var(axis=(0, 1))
    np.testing.assert_allclose(y.var(axis=(0, 1)), var / (var + 1e-5), rtol=1e-10)


def test_batchnorm_eval_identity_and_running_stats():
    bn = BatchNormState.fresh(2, np.float64)
    x = np.random.default_rng(1).normal(size=(3, 4, 2))
    y, _ = batchnorm_forward(x, bn, training=False)
    np.testing.assert_allclose(y, x / math.sqrt(1 + 1e-5))
    batchnorm_forward(x + 10, bn, training=True)
    np.testing.assert_allclose(bn.running_mean, 0.1 * (x + 10).mean(axis=(0, 1)))


def test_batchnorm_rejects_bad_shapes():
    bn = BatchNormState.fresh(2, np.float64)
    with pytest.raises(DimensionError):
        batchnorm_forward(np.zeros((0, 4, 2)), bn, training=True)
    with pytest.raises(DimensionError):
        batchnorm_forward(np.zeros((1, 4, 3)), bn, training=True)


def test_dropout_modes():
    s = np.ones((200, 50), dtype=np.float32)
    out, mask = dropout_forward(s, 0.0, True, np.random.default_rng(0))
    assert out is s and mask is None
    out, _ = dropout_forward(s, 0.4, False)
    assert out is s
    out, mask = dropout_forward(s, 0.4, True, np.random.default_rng(0))
    kept = np.count_nonzero(out)
    n = s.size
    assert abs(kept - 0.6 * n) <= 3 * math.sqrt(n * 0.6 * 0.4)
    np.testing.assert_allclose(out[out != 0], 1 / 0.6, rtol=1e-6)
    out2, _ = dropout_forward(s, 0.4, True, np.random.default_rng(0))
    np.testing.assert_array_equal(out, out2)


# -- forward / loss ------------------------------------------------------------------

def test_zero_features_give_uniform_softmax(tiny_net):
    logits, _ = forward_pass(np.zeros((2, 10, 3)), tiny_net, training=True)
    assert np.all(logits == logits[0, 0])


def test_forward_is_deterministic():
    cfg = tiny_config(dtype="float32")
    x = np.random.default_rng(0).normal(size=(3, 10, 3))
    a, _ = forward_pass(x, init_net(cfg), training=False)
    b, _ = forward_pass(x, init_net(cfg), training=False)
    np.testing.assert_array_equal(a, b)


def test_pulse_through_two_narrow_layers():
    cfg = tiny_config(n_in=1, n_hidden=1, n_out=1, t_steps=30, t_d_max=10, l1_strength=0.0)
    net = init_net(cfg)
    net.sigma = 0.01
    l1, l2 = net.layers
    l1.sparse.theta[...] = 5.0
    l1.sparse.sign[...] = 1.0
    l1.delay[...] = 3.0
    l2.sparse.theta[...] = 1.0
    l2.sparse.sign[...] = 1.0
    l2.delay[...] = 4.0
    x = np.zeros((1, 30, 1))
    x[0, 0, 0] = 1.0
    net.bn.running_var[...] = 1.0 - 1e-5  # eval-mode batch norm is an exact identity
    _, cache = forward_pass(x, net, training=False)
    # input pulse at 0 -> hidden current at 0 + 3 + 1 -> hidden spike at 5
    # -> readout current at 5 + 4 + 1 = 10 -> readout potential from 11
    assert np.flatnonzero(cache.trace1.s_seq[0, :, 0]).tolist()[0] == 5
    u = cache.trace2.u_seq[0, :, 0]
    assert np.all(np.abs(u[:11]) < 1e-12)
    assert u[11] == pytest.approx(1.0, abs=1e-9)


def test_loss_examples(tiny_net):
    assert cross_entropy(np.zeros((3, 2)), [0, 1, 1]) == pytest.approx(math.log(2))
    assert cross_entropy(np.array([[500.0, -500.0]]), [0]) == pytest.approx(0.0, abs=1e-12)
    for layer in tiny_net.layers:
        layer.sparse.theta[...] = 0.0
    tiny_net.layers[0].sparse.theta[0, 0] = 1.5
    tiny_net.layers[1].sparse.theta[1, 2] = 0.5
    tiny_net.layers[1].sparse.theta[0, 0] = -3.0  # dormant, excluded
    logits = np.log(np.array([[math.e, 1.0]]))
    ce = cross_entropy(logits, [0])
    assert loss(logits, [0], tiny_net) == pytest.approx(ce + 0.1 * 2.0)
    with pytest.raises(DatasetError):
        cross_entropy(np.zeros((1, 2)), [2])


# -- backward ------------------------------------------------------------------------

def test_backward_requires_training_cache(tiny_net, tiny_batch):
    x, labels = tiny_batch
    _, cache = forward_pass(x, tiny_net, training=False)
    with pytest.raises(StateError):
        backward_pass(cache, labels, tiny_net)


def test_gradients_frozen_spikes(tiny_net, tiny_batch):
    x, labels = tiny_batch
    worst, checked, _, nonzero = gradient_check(tiny_net, x, labels, frozen=True)
    assert checked == 2 * (3 * 4 + 4 * 2)
    assert nonzero > 10
    assert worst <= 1e-4


def test_gradients_spike_stable_full_network(tiny_net, tiny_batch):
    x, labels = tiny_batch
    worst, checked, excluded, _ = gradient_check(tiny_net, x, labels, frozen=False)
    assert checked + excluded == 2 * (3 * 4 + 4 * 2)
    assert checked > 0
    assert worst <= 1e-3


def test_zero_network_has_only_l1_gradient(tiny_net):
    for layer in tiny_net.layers:
        layer.sparse.theta[...] = 0.0
    x = np.zeros((2, 10, 3))
    logits, cache = forward_pass(x, tiny_net, training=True)
    g = backward_pass(cache, [0, 1], tiny_net)
    for arr in g.theta + g.delay + [g.gamma, g.beta]:
        assert not np.any(arr)


def test_duplicated_synapse_splits_gradient():
    """Copy an input channel, halve both copies: each copy sees the original gradient."""
    cfg = tiny_config(l1_strength=0.0)
    net = init_net(cfg)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 10, 3))
    labels = np.array([1, 0, 0, 1])
    _, cache = forward_pass(x, net, training=True)
    ref = backward_pass(cache, labels, net)

    dup = init_net(tiny_config(l1_strength=0.0, n_in=4))
    l1, l1d = net.layers[0], dup.layers[0]
    l1d.sparse.theta[...] = np.hstack([l1.theta, l1.theta[:, :1]]) / np.array([2, 1, 1, 2])
    l1d.sparse.sign[...] = np.hstack([l1.sign, l1.sign[:, :1]])
    l1d.delay[...] = np.hstack([l1.delay, l1.delay[:, :1]])
    for dst, src in zip(dup.layers[1:], net.layers[1:]):
        dst.sparse.theta[...] = src.theta
        dst.sparse.sign[...] = src.sign
        dst.delay[...] = src.delay
    logits_ref, _ = forward_pass(x, net, training=True)
    logits_dup, cache_dup = forward_pass(np.concatenate([x, x[:, :, :1]], axis=2), dup,
                                         training=True)
    np.testing.assert_allclose(logits_dup, logits_ref, rtol=1e-12, atol=1e-12)
    g = backward_pass(cache_dup, labels, dup)
    np.testing.assert_allclose(g.weight[0][:, 0], ref.weight[0][:, 0], rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(g.weight[0][:, 3], ref.weight[0][:, 0], rtol=1e-9, atol=1e-12)
    w_ref = l1.weights()[:, 0]
    w_dup = dup.layers[0].weights()
    np.testing.assert_allclose(w_dup[:, 0] * g.weight[0][:, 0] + w_dup[:, 3] * g.weight[0][:, 3],
                               w_ref * ref.weight[0][:, 0], rtol=1e-9, atol=1e-12)


def test_candidate_gradients_cover_dormant_entries(tiny_net, tiny_batch):
    x, labels = tiny_batch
    _, cache = forward_pass(x, tiny_net, training=True)
    j = int(np.argmax(cache.trace1.s_seq.sum(axis=(0, 1))))  # a hidden neuron that fires
    tiny_net.layers[1].sparse.theta[0, j] = -0.5
    _, cache = forward_pass(x, tiny_net, training=True)
    g = backward_pass(cache, labels, tiny_net)
    assert g.theta[1][0, j] == 0.0
    assert g.delay[1][0, j] == 0.0
    assert g.candidate[1][0, j] == tiny_net.layers[1].sign[0, j] * g.weight[1][0, j]
    assert g.candidate[1][0, j] != 0.0


# -- optimizer and schedules -----------------------------------------------------------

def test_adam_first_step_is_lr_sized():
    p = {"a": np.array([1.0, -2.0, 3.0])}
    adam_step(p, {"a": np.array([0.3, -5.0, 1e-3])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["a"], [0.99, -1.99, 2.99], rtol=0, atol=1e-7)


def test_adam_zero_gradient_keeps_params():
    p = {"a": np.array([1.0, 2.0])}
    st = AdamState()
    for _ in range(10):
        adam_step(p, {"a": np.zeros(2)}, st, lr=0.1)
    np.testing.assert_array_equal(p["a"], [1.0, 2.0])


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 3))
    p = {"a": np.zeros(3)}
    st = AdamState()
    ref, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, 1):
        adam_step(p, {"a": g}, st, lr=0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["a"], ref, rtol=1e-12)


def test_schedules():
    cfg = tiny_config(lr_w_peak=5e-3, lr_w_warmup=0.3, lr_d_initial=0.1)
    assert schedule_lr(30, 100, cfg)[0] == pytest.approx(5e-3)
    assert schedule_lr(0, 100, cfg)[0] == pytest.approx(5e-3 / 25)
    assert schedule_lr(100, 100, cfg) == pytest.approx((5e-7, 0.0))
    assert schedule_lr(50, 100, cfg)[1] == pytest.approx(0.05, abs=1e-15)
    rates = [schedule_lr(s, 100, cfg) for s in range(101)]
    assert all(a >= 0 and b >= 0 for a, b in rates)
    assert all(b2 <= b1 for (_, b1), (_, b2) in zip(rates, rates[1:]))


# -- training loop -----------------------------------------------------------------------

def test_zero_epochs_returns_initial_state(small_task):
    _, _, (tr, te) = small_task
    cfg = small_config(epochs=0)
    net, metrics = train(tr, te, cfg)
    assert metrics == []
    np.testing.assert_array_equal(net.layers[0].theta, init_net(cfg).layers[0].theta)


def test_training_is_deterministic(small_task):
    _, _, (tr, te) = small_task
    cfg = small_config(epochs=2)
    _, m1 = train(tr, te, cfg)
    _, m2 = train(tr, te, cfg)
    assert m1 == m2


def test_dense_equals_fixed_full_mask(small_task):
    _, _, (tr, te) = small_task
    dense = small_config(sparsity_mode="dense", l1_strength=0.1)
    fixed = dense.replace(sparsity_mode="fixed", sparsity_p=0.0)
    net_a, m_a = train(tr, te, dense)
    net_b, m_b = train(tr, te, fixed)
    assert m_a == m_b
    np.testing.assert_array_equal(net_a.layers[1].theta, net_b.layers[1].theta)


def test_frozen_delays_never_move(small_task):
    _, _, (tr, te) = small_task
    cfg = small_config(learn_delays=False, sparsity_mode="fixed", sparsity_p=0.5)
    net, _ = train(tr, te, cfg)
    init = init_net(cfg)
    for a, b in zip(net.layers, init.layers):
        np.testing.assert_array_equal(a.delay, b.delay)


def test_train_rejects_mismatched_data(small_task):
    _, _, (tr, te) = small_task
    with pytest.raises(DatasetError):
        train(tr, te, small_config(n_in=7))


def test_surrogate_path_matches_smooth_relaxation(monkeypatch):
    """Whole-network check of the surrogate route, dropout and batch norm included.

    The spike step is swapped for arctan(pi v)/pi + 1/2 without reset; its true
    derivative is exactly the surrogate, so central differences of the relaxed
    network must agree with the surrogate backward pass.
    """
    import delaysnn.trainer as tr
    from delaysnn.neuron import LayerTrace

    real_forward, real_backward = tr.lif_forward, tr.lif_backward

    def soft_forward(i_seq, params, spiking=True):
        trace = real_forward(i_seq, params, spiking=False)
        if spiking:
            soft = np.arctan(np.pi * (trace.u_seq - params.theta)) / np.pi + 0.5
            soft[:, 0, :] = 0.0  # u[0] is a constant, not driven by inputs
            trace = LayerTrace(trace.u_seq, soft, trace.i_seq)
        return trace

    def soft_backward(trace, params, grad_u=None, grad_s=None, surrogate=True):
        no_reset = LayerTrace(trace.u_seq, np.zeros_like(trace.s_seq), trace.i_seq)
        return real_backward(no_reset, params, grad_u, grad_s, surrogate)

    monkeypatch.setattr(tr, "lif_forward", soft_forward)
    monkeypatch.setattr(tr, "lif_backward", soft_backward)

    cfg = tiny_config(dropout_p=0.3)
    net = init_net(cfg)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 10, 3))
    labels = np.array([0, 1, 0])

    def run():
        return tr.forward_pass(x, net, training=True, rng=np.random.default_rng(99))

    logits, cache = run()
    g = tr.backward_pass(cache, labels, net, surrogate=True)
    targets = [(net.layers[0].sparse.theta, g.theta[0]), (net.layers[0].delay, g.delay[0]),
               (net.layers[1].sparse.theta, g.theta[1]), (net.layers[1].delay, g.delay[1]),
               (net.bn.gamma, g.gamma), (net.bn.beta, g.beta)]
    h = 1e-6
    for arr, analytic in targets:
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = tr.loss(run()[0], labels, net)
            arr[idx] = orig - h
            dn = tr.loss(run()[0], labels, net)
            arr[idx] = orig
            numeric = (up - dn) / (2 * h)
            assert analytic[idx] == pytest.approx(numeric, rel=1e-5, abs=1e-9)
    assert np.abs(g.theta[0]).max() > 1e-3  # the hidden layer really receives gradient
