import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from deformseg.exceptions import DimensionError, DivergenceError
from deformseg.nn import (DeepClassifier, NetworkModel, TrainConfig, bce_loss_and_gradients,
                          dnn_forward, dnn_score, init_dnn_from_sdae, stack_sdae, train_dae,
                          train_dnn)


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def reference_dae(X, hidden, cfg):
    """Element-by-element SGD for a tied-weight dAE, consuming the RNG the same way."""
    rng = np.random.default_rng(cfg.seed)
    n, d = X.shape
    bound = 4.0 * math.sqrt(6.0 / (d + hidden))
    W = rng.uniform(-bound, bound, size=(hidden, d)).tolist()
    b = [0.0] * hidden
    c = [0.0] * d
    trace = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            B = len(idx)
            mask = rng.random((B, d)) >= cfg.corruption_rate if cfg.corruption_rate > 0 else None
            gW = [[0.0] * d for _ in range(hidden)]
            gb = [0.0] * hidden
            gc = [0.0] * d
            loss = 0.0
            for row, i in enumerate(idx):
                x = X[i]
                xin = [x[j] * (mask[row, j] if mask is not None else 1.0) for j in range(d)]
                h = [sig(sum(W[a][j] * xin[j] for j in range(d)) + b[a]) for a in range(hidden)]
                z = [sig(sum(W[a][j] * h[a] for a in range(hidden)) + c[j]) for j in range(d)]
                dz = [(z[j] - x[j]) * z[j] * (1 - z[j]) for j in range(d)]
                loss += 0.5 * sum((z[j] - x[j]) ** 2 for j in range(d))
                dh = [sum(W[a][j] * dz[j] for j in range(d)) * h[a] * (1 - h[a]) for a in range(hidden)]
                for a in range(hidden):
                    gb[a] += dh[a]
                    for j in range(d):
                        gW[a][j] += dh[a] * xin[j] + h[a] * dz[j]
                for j in range(d):
                    gc[j] += dz[j]
            total += loss
            lr = cfg.learning_rate
            for a in range(hidden):
                b[a] -= lr * gb[a] / B
                for j in range(d):
                    W[a][j] -= lr * gW[a][j] / B
            for j in range(d):
                c[j] -= lr * gc[j] / B
        trace.append(total / n)
    return np.array(W), np.array(b), trace


def one_hot_pairs():
    X = np.zeros((4, 8))
    for i in range(4):
        X[i, 2 * i] = X[i, 2 * i + 1] = 1.0
    return X


@pytest.mark.parametrize("corruption", [0.0, 0.25])
def test_dae_matches_scalar_reference(corruption):
    cfg = TrainConfig(learning_rate=0.5, batch_size=3, epochs=6, corruption_rate=corruption, seed=4)
    layer = train_dae(8, 4, one_hot_pairs(), cfg)
    W, b, trace = reference_dae(one_hot_pairs(), 4, cfg)
    np.testing.assert_allclose(layer.loss_trace, trace, rtol=0, atol=1e-10)
    np.testing.assert_allclose(layer.weight, W, rtol=0, atol=1e-10)
    np.testing.assert_allclose(layer.bias, b, rtol=0, atol=1e-10)


def test_dae_loss_decreases_without_corruption():
    rng = np.random.default_rng(0)
    X = rng.random((200, 6))
    layer = train_dae(6, 6, X, TrainConfig(0.5, 20, 30, 0.0, 1))
    assert len(layer.loss_trace) == 30
    assert layer.loss_trace[-1] < layer.loss_trace[0]


def test_dae_learns_repeated_patterns():
    rng = np.random.default_rng(3)
    X = np.repeat((rng.random((10, 5)) > 0.5).astype(float), 4, axis=0)
    layer = train_dae(5, 8, X, TrainConfig(2.0, 4, 500, 0.0, 0))
    assert layer.loss_trace[-1] < 1e-3


def test_dae_deterministic():
    X = np.random.default_rng(1).random((30, 5))
    a = train_dae(5, 3, X, TrainConfig(0.1, 7, 4, 0.25, 9))
    b = train_dae(5, 3, X, TrainConfig(0.1, 7, 4, 0.25, 9))
    assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)


def test_dae_errors():
    with pytest.raises(DimensionError):
        train_dae(5, 3, np.zeros((4, 6)), TrainConfig())
    with pytest.raises((DimensionError, ValueError)):
        train_dae(5, 3, np.zeros((0, 5)), TrainConfig())
    with pytest.raises(DivergenceError), np.errstate(over="ignore"):
        train_dae(4, 3, np.full((8, 4), 1e300), TrainConfig(1e300, 4, 2, 0.0, 0))


def test_trainconfig_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(corruption_rate=1.0)


def test_stack_shapes_and_forward_oracle():
    X = np.random.default_rng(2).random((40, 16))
    cfg = TrainConfig(0.1, 10, 2, 0.25, 5)
    layers = stack_sdae([16, 8, 4], X, cfg)
    assert [layer.weight.shape for layer in layers] == [(8, 16), (4, 8)]
    h1 = 1.0 / (1.0 + np.exp(-(X @ layers[0].weight.T + layers[0].bias)))
    again = train_dae(8, 4, h1, TrainConfig(0.1, 10, 2, 0.25, 6))
    np.testing.assert_array_equal(again.weight, layers[1].weight)


def test_stack_single_layer_is_train_dae():
    X = np.random.default_rng(2).random((20, 6))
    cfg = TrainConfig(0.1, 5, 3, 0.2, 11)
    (layer,) = stack_sdae([6, 3], X, cfg)
    ref = train_dae(6, 3, X, cfg)
    assert np.array_equal(layer.weight, ref.weight)


def test_paper_scale_layer_shapes_chain():
    # a one-sample, zero-epoch stack: only the shapes are of interest here
    layers = stack_sdae([30720, 800, 400], np.zeros((1, 30720)), TrainConfig(epochs=0))
    assert [layer.weight.shape for layer in layers] == [(800, 30720), (400, 800)]


def test_init_from_sdae_copies_and_scopes_seed():
    X = np.random.default_rng(0).random((20, 6))
    sdae = stack_sdae([6, 4, 3], X, TrainConfig(0.1, 5, 2, 0.0, 0))
    a = init_dnn_from_sdae(sdae, 1, seed=1)
    b = init_dnn_from_sdae(sdae, 1, seed=2)
    for i, layer in enumerate(sdae):
        assert np.array_equal(a.weights[i], layer.weight)
        assert np.array_equal(b.weights[i], layer.weight)
    assert a.weights[-1].shape == (1, 3)
    assert not np.array_equal(a.weights[-1], b.weights[-1])
    with pytest.raises(DimensionError):
        init_dnn_from_sdae(sdae, 0)


def tiny_net(seed=0, dims=(3, 4, 2, 1)):
    rng = np.random.default_rng(seed)
    ws = [rng.normal(0, 1, (dims[i + 1], dims[i])) for i in range(len(dims) - 1)]
    bs = [rng.normal(0, 1, dims[i + 1]) for i in range(len(dims) - 1)]
    return NetworkModel(dims, tuple(ws), tuple(bs))


def test_gradient_matches_finite_differences():
    net = tiny_net()
    assert net.n_parameters <= 50
    rng = np.random.default_rng(1)
    X = rng.random((7, 3))
    y = (rng.random(7) > 0.5).astype(float)
    ws = [w.copy() for w in net.weights]
    bs = [b.copy() for b in net.biases]
    _, g_w, g_b = bce_loss_and_gradients(ws, bs, X, y)
    h = 1e-5
    worst = 0.0
    for params, grads in ((ws, g_w), (bs, g_b)):
        for p, g in zip(params, grads):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up = bce_loss_and_gradients(ws, bs, X, y)[0]
                p[idx] = old - h
                down = bce_loss_and_gradients(ws, bs, X, y)[0]
                p[idx] = old
                fd = (up - down) / (2 * h)
                worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-8))
    assert worst <= 1e-4


def test_train_dnn_separable():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(0.25, 0.05, (20, 2)), rng.normal(0.75, 0.05, (20, 2))])
    y = np.r_[np.zeros(20), np.ones(20)]
    net = init_dnn_from_sdae(stack_sdae([2, 4], X, TrainConfig(0.1, 10, 1, 0.0, 0)), 1, 0)
    out = train_dnn(net, X, y, TrainConfig(1.0, 8, 200, 0.0, 0))
    assert np.mean((dnn_forward(out, X) > 0.5) == y) == 1.0
    assert all(not np.array_equal(a, b) for a, b in zip(out.weights, net.weights))


def test_train_dnn_zero_epochs_and_determinism():
    net = tiny_net(dims=(3, 2, 1))
    X = np.random.default_rng(0).random((10, 3))
    y = np.r_[np.zeros(5), np.ones(5)]
    assert train_dnn(net, X, y, TrainConfig(0.1, 4, 0, 0.0, 0)) is net
    a = train_dnn(net, X, y, TrainConfig(0.1, 4, 5, 0.0, 3))
    b = train_dnn(net, X, y, TrainConfig(0.1, 4, 5, 0.0, 3))
    assert all(np.array_equal(p, q) for p, q in zip(a.weights, b.weights))


def test_train_dnn_single_class_warns():
    net = tiny_net(dims=(3, 2, 1))
    with pytest.warns(RuntimeWarning, match="single class"):
        train_dnn(net, np.zeros((4, 3)), np.ones(4), TrainConfig(0.1, 2, 1, 0.0, 0))


def test_rebalanced_epochs_use_equal_classes():
    net = tiny_net(dims=(2, 2, 1))
    X = np.random.default_rng(0).random((13, 2))
    y = np.r_[np.ones(3), np.zeros(10)]
    out = train_dnn(net, X, y, TrainConfig(0.1, 100, 2, 0.0, 0), rebalance=True)
    assert len(out.loss_trace) == 2


def test_score_hand_computed():
    W1 = np.array([[0.5, -1.0], [2.0, 0.25]])
    b1 = np.array([0.1, -0.3])
    W2 = np.array([[1.5, -0.7]])
    b2 = np.array([0.2])
    net = NetworkModel((2, 2, 1), (W1, W2), (b1, b2))
    x = np.array([0.3, 0.9])
    h = [sig(0.5 * 0.3 - 1.0 * 0.9 + 0.1), sig(2.0 * 0.3 + 0.25 * 0.9 - 0.3)]
    expect = sig(1.5 * h[0] - 0.7 * h[1] + 0.2)
    assert abs(dnn_score(net, x) - expect) <= 1e-12
    zero = NetworkModel((2, 1), (np.zeros((1, 2)),), (np.zeros(1),))
    assert dnn_score(zero, x) == 0.5
    with pytest.raises(DimensionError):
        dnn_score(net, np.zeros(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_score_in_open_interval(seed, scale):
    net = tiny_net(seed)
    net = NetworkModel(net.layer_dims, tuple(w * scale for w in net.weights), net.biases)
    x = np.random.default_rng(seed).random(3)
    s = dnn_score(net, x)
    assert 0.0 < s < 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_lipschitz_bound(seed):
    net = tiny_net(seed)
    rng = np.random.default_rng(seed)
    # sigmoid slope is at most 1/4 per layer
    bound = np.prod([0.25 * np.linalg.norm(w, 2) for w in net.weights])
    x = rng.random(3)
    dx = rng.normal(0, 1e-3, 3)
    change = abs(dnn_forward(net, x + dx) - dnn_forward(net, x))
    assert change <= bound * np.linalg.norm(dx) * (1 + 1e-9)


def test_model_invariants_enforced():
    with pytest.raises(DimensionError):
        NetworkModel((2, 3, 1), (np.zeros((3, 2)), np.zeros((1, 2))), (np.zeros(3), np.zeros(1)))
    with pytest.raises(ValueError):
        NetworkModel((2, 1), (np.full((1, 2), np.nan),), (np.zeros(1),))


def test_model_json_roundtrip_is_exact(tmp_path):
    net = tiny_net(5)
    net.save(tmp_path / "m.json")
    back = NetworkModel.load(tmp_path / "m.json")
    assert back.layer_dims == net.layer_dims
    assert all(np.array_equal(a, b) for a, b in zip(back.weights, net.weights))
    assert all(np.array_equal(a, b) for a, b in zip(back.biases, net.biases))


def test_deep_classifier_estimator_api():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(0.3, 0.05, (30, 4)), rng.normal(0.7, 0.05, (30, 4))])
    y = np.r_[np.zeros(30, int), np.ones(30, int)]
    clf = DeepClassifier(hidden_dims=(6,), pretrain_lr=0.1, finetune_lr=1.0, batch_size=10,
                         pretrain_epochs=2, finetune_epochs=100)
    assert clone(clf).get_params() == clf.get_params()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        clf.fit(X, y)
    assert (clf.predict(X) == y).mean() == 1.0
    proba = clf.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
