import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quadpursuit.nn import (
    LOG_STD_MAX, LOG_STD_MIN, MAGIC, Adam, Mlp, SquashedGaussian, clip_by_global_norm, global_norm, init_policy,
    init_value, load_arrays, load_policy, mlp_arrays, mlp_from_arrays, policy_forward, save_arrays, save_policy,
    value_forward,
)


def zero_net(sizes):
    return Mlp([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])], [np.zeros(b) for b in sizes[1:]])


def flat_params(net):
    return np.concatenate([p.ravel() for p in net.params()])


def set_flat(net, theta):
    k = 0
    for p in net.params():
        p[...] = theta[k:k + p.size].reshape(p.shape)
        k += p.size


# ---------------------------------------------------------------- forward

def test_zero_policy_gives_zero_mean_and_log_std():
    net = zero_net([24, 8, 8, 8])
    mean, log_std = policy_forward(net, np.ones(24))
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_array_equal(log_std, 0.0)


def test_zero_value_gives_zero():
    assert value_forward(zero_net([34, 8, 1]), np.ones(34)) == 0.0


def test_hand_computed_toy_policy():
    # 2 -> 2 -> 2 net, one hidden unit negative so ReLU matters
    W0 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b0 = np.array([0.5, -3.0])
    W1 = np.array([[1.5, -0.25], [4.0, 2.0]])
    b1 = np.array([0.1, -0.2])
    net = Mlp([W0, W1], [b0, b1])
    x = np.array([1.0, 2.0])
    # hidden pre-activation: [1 + 4 + 0.5, -1 + 1 - 3] = [5.5, -3] -> relu [5.5, 0]
    # output: [5.5 * 1.5 + 0.1, 5.5 * -0.25 - 0.2] = [8.35, -1.575]
    mean, log_std = policy_forward(net, x)
    assert mean[0] == pytest.approx(8.35, abs=1e-15)
    assert log_std[0] == pytest.approx(-1.575, abs=1e-15)


def test_hand_computed_toy_value():
    net = Mlp([np.array([[2.0], [-1.0]]), np.array([[3.0]])], [np.array([1.0]), np.array([-0.5])])
    # relu(2*0.5 - 1*4 + 1) = relu(-2) = 0 -> -0.5 ; relu(2*3 - 1 + 1) = 6 -> 17.5
    assert value_forward(net, np.array([0.5, 4.0])) == pytest.approx(-0.5)
    assert value_forward(net, np.array([3.0, 1.0])) == pytest.approx(17.5)


def test_log_std_clamped():
    net = zero_net([3, 4])
    net.biases[0][:] = [0.0, 0.0, 9.0, -9.0]
    _, log_std = policy_forward(net, np.zeros(3))
    np.testing.assert_array_equal(log_std, [LOG_STD_MAX, LOG_STD_MIN])


def test_forward_is_deterministic_and_checks_width():
    net = init_policy(24, 4, (32, 32), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, 24))
    np.testing.assert_array_equal(net(x), net(x))
    with pytest.raises(ValueError):
        net(np.ones(23))


def test_policy_init_sits_at_bias():
    bias = np.array([-0.5, 0.0, 0.0, 0.0])
    net = init_policy(24, 4, (64, 64), np.random.default_rng(0), np.float64, np.arctanh(bias), -0.5)
    mean, log_std = policy_forward(net, np.random.default_rng(2).uniform(-1, 1, size=(100, 24)))
    assert np.abs(np.tanh(mean) - bias).max() < 0.05
    np.testing.assert_allclose(log_std, -0.5, atol=0.05)


# --------------------------------------------------------------- backward

def test_linear_layer_gradient_of_half_square_output():
    # one linear layer fed the identity: out = W + b, loss = |out|^2 / 2 -> dW = out, db = column sums
    rng = np.random.default_rng(0)
    W, b = rng.normal(size=(4, 3)), rng.normal(size=3)
    net = Mlp([W.copy()], [b.copy()])
    out, cache = net.forward(np.eye(4))
    gW, gb = net.backward(cache, out)
    np.testing.assert_allclose(gW, W + b, rtol=1e-14)
    np.testing.assert_allclose(gb, (W + b).sum(axis=0), rtol=1e-14)


def test_constant_loss_has_zero_gradient():
    net = init_policy(24, 4, (8, 8), np.random.default_rng(0), np.float64)
    _, cache = net.forward(np.ones((3, 24)))
    for g in net.backward(cache, np.zeros((3, 8))):
        np.testing.assert_array_equal(g, 0.0)


def fd_check(net, x, weights_out, eps=1e-5):
    def loss():
        return float(np.sum(weights_out * np.tanh(net(x))))

    out, cache = net.forward(x)
    grads = net.backward(cache, weights_out * (1 - np.tanh(out) ** 2))
    analytic = np.concatenate([g.ravel() for g in grads])
    theta = flat_params(net)
    numeric = np.zeros_like(theta)
    for i in range(theta.size):
        t = theta.copy()
        t[i] += eps
        set_flat(net, t)
        lp = loss()
        t[i] -= 2 * eps
        set_flat(net, t)
        lm = loss()
        numeric[i] = (lp - lm) / (2 * eps)
    set_flat(net, theta)
    return np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)))


@pytest.mark.parametrize("seed", range(100))
def test_toy_net_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = Mlp.init([24, 8, 8, 5], rng, dtype=np.float64)
    for b in net.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(6, 24))
    w = rng.normal(size=(6, 5))
    assert fd_check(net, x, w) < 1e-4


def test_float32_network_backward_runs_in_float32():
    net = init_policy(24, 4, (16, 16), np.random.default_rng(0))
    out, cache = net.forward(np.ones((2, 24), dtype=np.float32))
    grads = net.backward(cache, np.ones_like(out))
    assert all(g.dtype == np.float32 for g in grads)


# --------------------------------------------------------- distribution

def test_samples_strictly_inside_unit_box():
    rng = np.random.default_rng(0)
    d = SquashedGaussian(np.full((10000, 4), 3.0), np.full((10000, 4), 1.0))
    a, u, _ = d.sample(rng)
    assert np.all(np.abs(a) < 1.0)
    np.testing.assert_array_equal(a, np.tanh(u))


def test_small_std_limit_is_tanh_mean():
    mean = np.array([[0.3, -1.2, 0.0, 2.0]])
    a, _, _ = SquashedGaussian(mean, np.full((1, 4), -20.0)).sample(np.random.default_rng(0))
    np.testing.assert_allclose(a, np.tanh(mean), atol=1e-8)


def test_squashed_density_integrates_to_one():
    # 1-D density over (-1, 1): Monte-Carlo E_{a~U(-1,1)}[2 p(a)] = 1 with 1e6 samples
    rng = np.random.default_rng(0)
    d = SquashedGaussian(np.array([[0.4]]), np.array([[-0.3]]))
    a = rng.uniform(-1 + 1e-9, 1 - 1e-9, size=(10**6, 1))
    u = np.arctanh(a)
    logp = SquashedGaussian(np.full_like(u, 0.4), np.full_like(u, -0.3)).log_prob(u)
    assert abs(2.0 * np.mean(np.exp(logp)) - 1.0) < 0.02
    # and a fine deterministic grid
    grid = np.linspace(-1 + 1e-7, 1 - 1e-7, 400001)[:, None]
    ug = np.arctanh(grid)
    pg = np.exp(SquashedGaussian(np.full_like(ug, 0.4), np.full_like(ug, -0.3)).log_prob(ug))
    assert abs(np.trapezoid(pg, grid[:, 0]) - 1.0) < 0.02
    assert d.entropy()[0] == pytest.approx(-0.3 + 0.5 * (1 + math.log(2 * math.pi)))


def test_log_prob_matches_gaussian_change_of_variables():
    rng = np.random.default_rng(3)
    mean, log_std = rng.normal(size=(50, 4)), rng.uniform(-1, 0.5, size=(50, 4))
    u = rng.normal(size=(50, 4))
    d = SquashedGaussian(mean, log_std)
    z = (u - mean) / np.exp(log_std)
    gauss = np.sum(-0.5 * z**2 - log_std - 0.5 * np.log(2 * np.pi), axis=-1)
    np.testing.assert_allclose(d.gaussian_log_prob(u), gauss, rtol=1e-12)
    np.testing.assert_allclose(d.log_prob(u), gauss - np.sum(np.log(1 - np.tanh(u) ** 2 + 1e-6), axis=-1), rtol=1e-12)


# -------------------------------------------------------------- optimizer

@settings(max_examples=100, deadline=None)
@given(scale=st.floats(1e-3, 1e3), max_norm=st.floats(0.1, 10))
def test_clip_by_global_norm_bound(scale, max_norm):
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=(3, 4)) * scale, rng.normal(size=5) * scale]
    clipped, norm = clip_by_global_norm(grads, max_norm)
    assert norm == pytest.approx(global_norm(grads))
    assert global_norm(clipped) <= max_norm + 1e-9
    if norm <= max_norm:
        for a, b in zip(clipped, grads):
            np.testing.assert_array_equal(a, b)


def test_adam_first_step_moves_by_lr():
    p = np.array([1.0, -2.0])
    opt = Adam([p], lr=0.1, eps=0.0)
    opt.step([np.array([3.0, -0.5])])
    np.testing.assert_allclose(p, [0.9, -1.9])


def test_adam_minimizes_quadratic():
    p = np.array([5.0, -3.0])
    opt = Adam([p], lr=0.05)
    for _ in range(2000):
        opt.step([2 * p])
    assert np.abs(p).max() < 1e-2


# ------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a": rng.normal(size=(3, 5)).astype(np.float32),
        "b": rng.normal(size=7),
        "c": np.arange(6, dtype=np.int64).reshape(2, 3),
        "d": np.array([True, False]).astype(np.uint8),
    }
    path = tmp_path / "x.ckpt"
    save_arrays(path, arrays, {"note": "hi"})
    back, meta = load_arrays(path)
    assert meta == {"note": "hi"}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()
    assert path.read_bytes()[:8] == MAGIC


def test_policy_checkpoint_round_trip(tmp_path):
    net = init_policy(24, 4, (16, 16), np.random.default_rng(0))
    save_policy(tmp_path / "p.ckpt", net, {"role": "pursuer"})
    back = load_policy(tmp_path / "p.ckpt")
    x = np.random.default_rng(1).normal(size=(4, 24))
    np.testing.assert_array_equal(back(x), net(x))
    assert set(mlp_arrays("policy", net)) == {"policy.W0", "policy.b0", "policy.W1", "policy.b1", "policy.W2", "policy.b2"}
    with pytest.raises(KeyError):
        mlp_from_arrays("value", mlp_arrays("policy", net))


def test_checkpoint_rejects_foreign_file(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_arrays(bad)
