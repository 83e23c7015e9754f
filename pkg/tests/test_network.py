import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from mixedsim.imperfections import ImperfectionStack, TempShift
from mixedsim.network import (Adam, BatchNorm, Conv2D, Dense, MaxPool2, MiniConvNetClassifier, SGDMomentum,
                              TrainingDiverged, accuracy, build_mini_convnet, build_mlp, gradient_check,
                              make_blob_dataset, make_optimizer, network_from_json, network_to_json,
                              predict_logits, softmax_xent, train)


def naive_conv(x, W, k):
    """Loop-level same convolution with zero padding."""
    n, h, w, c = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    Wk = W.reshape(k, k, c, -1)
    out = np.zeros((n, h, w, W.shape[1]))
    for i in range(h):
        for j in range(w):
            for di in range(k):
                for dj in range(k):
                    out[:, i, j, :] += xp[:, i + di, j + dj, :] @ Wk[di, dj]
    return out


def test_conv_matches_loop_oracle(rng):
    x = rng.uniform(0, 1, (3, 8, 8, 2))
    W = rng.normal(size=(5 * 5 * 2, 4))
    layer = Conv2D(W, 2, 5)
    layer.x_range = 1.0
    np.testing.assert_allclose(layer.forward(x), naive_conv(x, W, 5), atol=1e-12)


def test_conv_rejects_bad_shapes(rng):
    with pytest.raises(ValueError):
        Conv2D(rng.normal(size=(10, 3)), 2, 5)
    layer = Conv2D(rng.normal(size=(25, 3)), 1, 5)
    with pytest.raises(ValueError):
        layer.forward(rng.uniform(size=(2, 8, 8, 3)))


def test_maxpool_forward_backward(rng):
    x = rng.normal(size=(2, 4, 4, 3))
    pool = MaxPool2()
    y = pool.forward(x)
    ref = x.reshape(2, 2, 2, 2, 2, 3).max(axis=(2, 4))
    np.testing.assert_array_equal(y, ref)
    g = pool.backward(np.ones_like(y))
    assert g.sum() == y.size
    assert np.all(g[g > 0] == 1) and np.all(x[g > 0] == np.repeat(np.repeat(ref, 2, 1), 2, 2)[g > 0])


def test_gradient_check_convnet():
    d = make_blob_dataset(64, 10, 10, seed=0)
    net = build_mini_convnet(seed=0, channels=(2, 3), hidden=8)
    assert gradient_check(net, d.X_train[:16], d.y_train[:16], probes=100) < 1e-4


def test_gradient_check_mlp(rng):
    net = build_mlp([5, 7, 3], seed=2)
    X = rng.normal(size=(12, 5))
    assert gradient_check(net, X, np.arange(12) % 3, probes=50) < 1e-4


def test_gradient_check_restores_running_stats():
    d = make_blob_dataset(32, 10, 10, seed=1)
    net = build_mini_convnet(seed=0, channels=(2, 3), hidden=8)
    before = [b.running_mean.copy() for b in net.batchnorms]
    gradient_check(net, d.X_train, d.y_train, probes=5)
    for b, m in zip(net.batchnorms, before):
        np.testing.assert_array_equal(b.running_mean, m)


def test_softmax_xent_gradient_sums_to_zero(rng):
    z = rng.normal(size=(6, 4))
    loss, d = softmax_xent(z, np.array([0, 1, 2, 3, 0, 1]))
    assert loss > 0
    np.testing.assert_allclose(d.sum(axis=1), 0, atol=1e-15)


def test_zero_lr_leaves_parameters_unchanged():
    d = make_blob_dataset(40, 10, 10, seed=2)
    net = build_mini_convnet(seed=3, channels=(2, 3), hidden=8)
    before = [a.copy() for _, _, a in net.parameters()]
    train(net, d.X_train, d.y_train, epochs=1, batch_size=8, lr=0.0)
    for b, (_, _, a) in zip(before, net.parameters()):
        np.testing.assert_array_equal(a, b)


def test_bn_only_training_freezes_weights():
    d = make_blob_dataset(40, 10, 10, seed=2)
    net = build_mini_convnet(seed=3, channels=(2, 3), hidden=8)
    W = [l.W.copy() for l in net.synaptic]
    gamma = [b.gamma.copy() for b in net.batchnorms]
    train(net, d.X_train, d.y_train, epochs=1, batch_size=8, lr=1e-2, trainable="bn")
    for w, l in zip(W, net.synaptic):
        np.testing.assert_array_equal(w, l.W)
    assert any(not np.array_equal(g, b.gamma) for g, b in zip(gamma, net.batchnorms))


def test_training_is_deterministic():
    d = make_blob_dataset(60, 10, 10, seed=4)
    nets = []
    for _ in range(2):
        net = build_mini_convnet(seed=5, channels=(2, 3), hidden=8)
        train(net, d.X_train, d.y_train, epochs=2, batch_size=16, seed=9, weight_noise=0.05)
        nets.append(network_to_json(net))
    assert nets[0] == nets[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_history():
    d = make_blob_dataset(40, 10, 10, seed=2)
    net = build_mini_convnet(seed=3, channels=(2, 3), hidden=8)
    net.synaptic[-1].W[:] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        train(net, d.X_train, d.y_train, epochs=1, batch_size=8)
    assert info.value.history == []


def test_empty_training_set():
    with pytest.raises(ValueError):
        train(build_mlp([2, 2]), np.zeros((0, 2)), np.zeros(0, dtype=int))


@pytest.mark.parametrize("opt", [Adam(1e-2), SGDMomentum(1e-2, 0.9, 1e-4)])
def test_optimizers_reduce_loss(opt, rng):
    X = rng.normal(size=(200, 4))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    net = build_mlp([4, 8, 2], seed=0)
    hist = train(net, X, y, epochs=15, batch_size=20, optimizer=opt)
    assert hist[-1]["loss"] < hist[0]["loss"]
    assert hist[-1]["train_acc"] > 0.85


def test_make_optimizer_rejects_unknown():
    assert isinstance(make_optimizer("sgd"), SGDMomentum)
    with pytest.raises(ValueError):
        make_optimizer("rmsprop")


def test_batchnorm_train_and_eval_modes(rng):
    bn = BatchNorm(3, momentum=1.0)
    x = rng.normal(2.0, 3.0, size=(500, 3))
    y = bn.forward(x, train=True)
    np.testing.assert_allclose(y.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=0), 1, atol=1e-4)
    np.testing.assert_allclose(bn.running_mean, x.mean(axis=0))
    ye = bn.forward(x)
    np.testing.assert_allclose(ye.mean(axis=0), 0, atol=1e-12)
    bn.override = (np.full(3, 2.0), np.ones(3))
    np.testing.assert_allclose(bn.forward(x), 2 * x + 1)


def test_serialisation_round_trip(trained_net, small_data):
    text = network_to_json(trained_net)
    back = network_from_json(text)
    assert network_to_json(back) == text
    X = small_data.X_test[:50]
    np.testing.assert_array_equal(predict_logits(trained_net, X), predict_logits(back, X))


def test_serialisation_rejects_foreign_documents():
    with pytest.raises(ValueError):
        network_from_json('{"format": "other", "version": 1, "layers": []}')


def test_op_counts():
    net = build_mini_convnet(seed=0, channels=(8, 16), hidden=64)
    assert net.op_counts() == [16 * 16 * 25 * 8, 8 * 8 * 25 * 8 * 16, 4 * 4 * 16 * 64, 64 * 10]


def test_dataset_determinism_and_range():
    a = make_blob_dataset(50, 20, 20, seed=7)
    b = make_blob_dataset(50, 20, 20, seed=7)
    c = make_blob_dataset(50, 20, 20, seed=8)
    np.testing.assert_array_equal(a.X_train, b.X_train)
    assert not np.array_equal(a.X_train, c.X_train)
    assert a.X_train.shape == (50, 16, 16, 1)
    assert a.X_train.min() >= 0 and a.X_train.max() <= 1
    assert set(np.unique(a.y_train)) <= set(range(10))


@given(st.integers(1, 6), st.integers(1, 5))
@settings(max_examples=20, deadline=None)
def test_dense_is_linear(n, m):
    rng = np.random.default_rng(n * 10 + m)
    layer = Dense(rng.normal(size=(n, m)))
    x = rng.uniform(0, 1, (4, n))
    np.testing.assert_allclose(layer.forward(x), x @ layer.W)


def test_calibrate_ranges_sets_input_maxima(trained_net, small_data):
    highs = trained_net.copy().calibrate_ranges(small_data.X_train)
    assert highs[0] == pytest.approx(small_data.X_train.max())
    assert np.all(highs > 0)


def test_classifier_api(small_data):
    clf = MiniConvNetClassifier(channels=(2, 4), hidden=8, epochs=2, batch_size=32, seed=1)
    params = clf.get_params()
    assert params["hidden"] == 8
    twin = clone(clf)
    assert twin.get_params() == params
    clf.fit(small_data.X_train[..., 0], small_data.y_train)
    pred = clf.predict(small_data.X_test)
    assert pred.shape == (len(small_data.X_test),)
    proba = clf.predict_proba(small_data.X_test[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1)
    base = clf.score(small_data.X_test, small_data.y_test)
    assert base == clf.score(small_data.X_test, small_data.y_test, stack=ImperfectionStack([TempShift(25.0)]))
    assert 0 <= base <= 1


def test_classifier_requires_fit():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        MiniConvNetClassifier().predict(np.zeros((1, 16, 16)))


def test_classifier_rejects_non_square():
    with pytest.raises(ValueError):
        MiniConvNetClassifier(epochs=0).fit(np.zeros((2, 4, 5)), [0, 1])


@pytest.mark.slow
def test_desk_scale_accuracy():
    d = make_blob_dataset(seed=0)
    net = build_mini_convnet(seed=0)
    train(net, d.X_train, d.y_train, epochs=10, seed=0)
    assert accuracy(net, d.X_test, d.y_test) >= 0.90
