import struct

import numpy as np
import pytest

from app.engine import nn
from app.engine.nn import HeadKind, Mlp, OptimizerState
from app.exceptions import ConfigurationError, FileFormatError, NumericalError


def _numeric_grad(net, x, upstream, eps=1e-6):
    base = net.get_params()
    grad = np.zeros_like(base)
    for i in range(base.size):
        for sign in (1.0, -1.0):
            p = base.copy()
            p[i] += sign * eps
            net.set_params(p)
            grad[i] += sign * np.sum(upstream * net.forward(x)) / (2 * eps)
    net.set_params(base)
    return grad


@pytest.mark.parametrize("head,out_dim", [(HeadKind.linear, 3), (HeadKind.sigmoid, 1), (HeadKind.gaussian, 4)])
def test_backward_matches_finite_differences(head, out_dim):
    rng = np.random.default_rng(0)
    net = Mlp.init([5, 7, 6, out_dim], head, rng)
    x = rng.normal(size=(4, 5))
    upstream = rng.normal(size=(4, out_dim))
    analytic = nn.backward(net, x, upstream)
    numeric = _numeric_grad(net, x, upstream)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_param_count_and_layout():
    net = Mlp.init([3, 4, 2], HeadKind.linear, np.random.default_rng(1))
    assert net.num_params == 3 * 4 + 4 + 4 * 2 + 2
    names = [name for name, _, _ in net.layout()]
    assert names == ["layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias"]
    flat = net.get_params()
    _, weight_slice, shape = net.layout()[0]
    np.testing.assert_array_equal(flat[weight_slice].reshape(shape), net.weights[0])


def test_set_params_round_trip_and_validation():
    rng = np.random.default_rng(2)
    net = Mlp.init([3, 4, 2], HeadKind.linear, rng)
    params = rng.normal(size=net.num_params)
    net.set_params(params)
    np.testing.assert_array_equal(net.get_params(), params)
    with pytest.raises(ConfigurationError):
        net.set_params(params[:-1])


def test_invalid_networks_are_rejected():
    with pytest.raises(ConfigurationError):
        Mlp([3])
    with pytest.raises(ConfigurationError):
        Mlp([3, 3], HeadKind.gaussian)
    net = Mlp([3, 2])
    with pytest.raises(ConfigurationError):
        net.forward(np.zeros(4))


def test_heads_bound_their_outputs():
    rng = np.random.default_rng(3)
    sig = Mlp.init([2, 4, 1], HeadKind.sigmoid, rng)
    out = sig.forward(rng.normal(scale=1e3, size=(20, 2)))
    assert np.all(out > 0) and np.all(out < 1)

    gauss = Mlp.init([2, 4, 6], HeadKind.gaussian, rng)
    gauss.biases[-1][3:] = 50.0
    out = gauss.forward(rng.normal(size=(5, 2)))
    assert np.all(out[:, 3:] <= nn.LOG_STD_MAX)


def test_single_input_gives_single_output():
    net = Mlp.init([3, 2], HeadKind.linear, np.random.default_rng(4))
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(nn.forward(net, x), net.forward(x[None, :])[0])


def test_adam_first_step_moves_by_learning_rate():
    net = Mlp([2, 1])
    opt = OptimizerState.for_net(net, lr=0.1)
    grad = np.array([1.0, -2.0, 0.5])
    updated = nn.step(opt, net.get_params(), grad)
    np.testing.assert_allclose(updated, -0.1 * np.sign(grad), rtol=1e-6)
    assert opt.t == 1


def test_adam_minimizes_a_quadratic():
    target = np.array([0.3, -1.2, 2.0])
    params = np.zeros(3)
    opt = OptimizerState(lr=0.01)
    for _ in range(5000):
        params = nn.step(opt, params, 2 * (params - target))
    np.testing.assert_allclose(params, target, atol=1e-2)


def test_non_finite_gradient_names_the_layer():
    net = Mlp([2, 3, 1])
    opt = OptimizerState.for_net(net)
    grad = np.zeros(net.num_params)
    grad[net.layout()[2][1].start] = np.nan
    with pytest.raises(NumericalError, match="layer1.weight"):
        nn.step(opt, net.get_params(), grad)


def test_weighted_average_matches_hand_arithmetic():
    np.testing.assert_allclose(nn.weighted_average([np.array([0.0]), np.array([4.0])], [0.25, 0.75]), [3.0])
    rng = np.random.default_rng(5)
    params = [rng.normal(size=10) for _ in range(4)]
    weights = [0.1, 0.2, 0.3, 0.4]
    expected = [sum(w * p[i] for w, p in zip(weights, params)) for i in range(10)]
    np.testing.assert_allclose(nn.weighted_average(params, weights), expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(25))
def test_weighted_average_follows_paired_permutations(seed):
    rng = np.random.default_rng(100 + seed)
    k = int(rng.integers(1, 6))
    params = [rng.normal(size=9) for _ in range(k)]
    weights = rng.dirichlet(np.ones(k))
    order = rng.permutation(k)
    np.testing.assert_allclose(nn.weighted_average([params[i] for i in order], weights[order]),
                               nn.weighted_average(params, weights), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("params,weights", [
    ([np.zeros(2), np.zeros(3)], [0.5, 0.5]),
    ([np.zeros(2), np.zeros(2)], [0.7, 0.7]),
    ([np.zeros(2), np.zeros(2)], [1.5, -0.5]),
    ([np.zeros(2)], [0.5, 0.5]),
])
def test_weighted_average_rejects_bad_inputs(params, weights):
    with pytest.raises(ConfigurationError):
        nn.weighted_average(params, weights)


def test_params_hash_is_stable():
    a = np.arange(5, dtype=float)
    assert nn.params_hash(a) == nn.params_hash(a.copy())
    assert nn.params_hash(a) != nn.params_hash(a + 1e-12)


def test_save_and_load_params(tmp_path):
    net = Mlp.init([4, 8, 6], HeadKind.gaussian, np.random.default_rng(6))
    path = nn.save_params(tmp_path / "policy.lfnn", net)
    loaded = nn.load_params(path)
    assert loaded.layer_dims == [4, 8, 6]
    assert loaded.head is HeadKind.gaussian
    assert nn.params_hash(loaded.get_params()) == nn.params_hash(net.get_params())


def test_load_params_rejects_bad_files(tmp_path):
    with pytest.raises(FileFormatError):
        nn.load_params(tmp_path / "missing.lfnn")

    bad = tmp_path / "bad.lfnn"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FileFormatError):
        nn.load_params(bad)

    net = Mlp([2, 2])
    path = nn.save_params(tmp_path / "short.lfnn", net)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FileFormatError, match="short.lfnn"):
        nn.load_params(path)


@pytest.mark.parametrize("cut", [nn._HEADER.size + 2, nn._HEADER.size + 8 + 3, -3])
def test_load_params_rejects_truncated_files(tmp_path, cut):
    path = nn.save_params(tmp_path / "cut.lfnn", Mlp([2, 2]))
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(FileFormatError, match="cut.lfnn"):
        nn.load_params(path)


@pytest.mark.parametrize("dims", [[], [3], [0, 2]])
def test_load_params_rejects_impossible_layouts(tmp_path, dims):
    path = tmp_path / "layout.lfnn"
    header = nn._HEADER.pack(nn.PARAM_MAGIC, nn.PARAM_VERSION, 0, len(dims))
    path.write_bytes(header + struct.pack(f"<{len(dims)}I", *dims) + np.zeros(2).tobytes())
    with pytest.raises(FileFormatError):
        nn.load_params(path)
