import numpy as np
import pytest

from bcdnet import tensor as T
from bcdnet.layers import GdnParams, SeParams, gdn, igdn, leaky_relu, se_block, se_scale
from bcdnet.tensor import ShapeError, Tensor
from oracles import gradient_check


def _gdn_direct(x, beta, gamma):
    out = np.empty_like(x)
    b, c, h, w = x.shape
    for n in range(b):
        for i in range(c):
            for y in range(h):
                for z in range(w):
                    norm = beta[i] + sum(gamma[i, j] * x[n, j, y, z] ** 2 for j in range(c))
                    out[n, i, y, z] = x[n, i, y, z] / np.sqrt(norm)
    return out


def test_gdn_matches_definition():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 2, 2))
    beta = rng.uniform(0.5, 2.0, 3)
    gamma = rng.uniform(0.0, 0.5, (3, 3))
    params = GdnParams.from_values(beta, gamma, np.float64)
    np.testing.assert_allclose(gdn(Tensor(x), params).data, _gdn_direct(x, beta, gamma), rtol=1e-10)
    np.testing.assert_allclose(igdn(Tensor(x), params).data, x * x / _gdn_direct(x, beta, gamma), rtol=1e-10)


def test_gdn_identity_and_scaled():
    x = Tensor(np.random.default_rng(1).normal(size=(1, 2, 3, 3)))
    ident = GdnParams.from_values(np.ones(2), np.zeros((2, 2)), np.float64)
    np.testing.assert_allclose(gdn(x, ident).data, x.data, rtol=1e-6)
    np.testing.assert_allclose(igdn(x, ident).data, x.data, rtol=1e-6)
    four = GdnParams.from_values(np.full(2, 4.0), np.zeros((2, 2)), np.float64)
    np.testing.assert_allclose(gdn(x, four).data, x.data / 2.0, rtol=1e-6)


def test_gdn_effective_parameters_stay_valid():
    params = GdnParams(Tensor(np.array([0.0, -3.0])), Tensor(np.array([[-1.0, 0.0], [2.0, 0.5]])))
    assert np.all(params.beta().data >= 1e-6)
    assert np.all(params.gamma().data >= 0)
    with pytest.raises(ValueError):
        GdnParams.from_values(np.zeros(2), np.zeros((2, 2)))


def test_gdn_channel_mismatch():
    with pytest.raises(ShapeError):
        gdn(Tensor(np.zeros((1, 3, 2, 2))), GdnParams.init(2))


def test_se_scale_in_unit_interval_and_applied_per_channel():
    rng = np.random.default_rng(4)
    params = SeParams.init(8, 4, rng, np.float64)
    x = Tensor(rng.normal(size=(2, 8, 5, 5)))
    s = se_scale(x, params).data
    assert s.shape == (2, 8, 1, 1)
    assert np.all((s > 0) & (s < 1))
    np.testing.assert_allclose(se_block(x, params).data, x.data * s)


def test_se_matches_direct_formula():
    rng = np.random.default_rng(5)
    params = SeParams.init(4, 2, rng, np.float64)
    params.reduce_b.data[:] = rng.normal(size=2)
    x = rng.normal(size=(1, 4, 3, 3))
    z = x.mean(axis=(2, 3))[0]
    hidden = np.maximum(params.reduce_w.data @ z + params.reduce_b.data, 0)
    gate = 1 / (1 + np.exp(-(params.expand_w.data @ hidden + params.expand_b.data)))
    np.testing.assert_allclose(se_scale(Tensor(x), params).data[0, :, 0, 0], gate, rtol=1e-12)


def test_se_requires_divisible_ratio():
    with pytest.raises(ValueError):
        SeParams.init(6, 4, np.random.default_rng(0))


def test_leaky_relu_slope():
    np.testing.assert_allclose(leaky_relu(Tensor(np.array([-1.0, 2.0]))).data, [-0.2, 2.0])


def _gdn_loss(inverse):
    def f(t):
        params = GdnParams(t["beta"], t["gamma"])
        y = igdn(t["x"], params) if inverse else gdn(t["x"], params)
        return T.tsum(y * T.Tensor(np.linspace(-1, 1, y.data.size).reshape(y.shape)))

    return f


@pytest.mark.parametrize("inverse", [False, True])
def test_gdn_gradients_64bit(inverse):
    rng = np.random.default_rng(6)
    inputs = {"x": rng.normal(size=(1, 3, 3, 3)), "beta": rng.uniform(0.5, 1.5, 3), "gamma": rng.uniform(0.1, 0.6, (3, 3))}
    rel, ab = gradient_check(_gdn_loss(inverse), inputs, dtype=np.float64)
    assert rel.max() < 1e-6 and ab.max() < 1e-6


def test_se_gradients_64bit():
    rng = np.random.default_rng(7)
    inputs = {
        "x": rng.normal(size=(2, 4, 3, 3)),
        "rw": rng.normal(size=(2, 4)),
        "rb": rng.normal(size=2),
        "ew": rng.normal(size=(4, 2)),
        "eb": rng.normal(size=4),
    }
    w = rng.normal(size=(2, 4, 3, 3))

    def f(t):
        y = se_block(t["x"], SeParams(t["rw"], t["rb"], t["ew"], t["eb"]))
        return T.tsum(y * T.Tensor(w))

    rel, ab = gradient_check(f, inputs, dtype=np.float64)
    assert np.mean(rel < 1e-6) >= 0.95 and ab.max() < 1e-6
