import numpy as np
import pytest

from mixedsim.network import build_mini_convnet, make_blob_dataset, train


@pytest.fixture(scope="session")
def small_data():
    return make_blob_dataset(n_train=800, n_val=200, n_test=300, seed=3)


@pytest.fixture(scope="session")
def trained_net(small_data):
    net = build_mini_convnet(seed=1, channels=(4, 8), hidden=32)
    train(net, small_data.X_train, small_data.y_train, epochs=4, batch_size=32, lr=3e-3, seed=1)
    net.calibrate_ranges(small_data.X_train)
    return net


@pytest.fixture
def net(trained_net):
    # tests may mutate clips or BN overrides
    return trained_net.copy()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
