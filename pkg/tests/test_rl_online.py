import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rfs.diffcore import Mlp, max_relative_error, numeric_grad
from rfs.envs import make_env
from rfs.modulation import ModulationPolicy
from rfs.rl_online import PPOConfig, compute_gae, normalize_advantages, policy_loss, train_online, value_loss


def test_gae_on_a_hand_worked_trajectory():
    # gamma 0.5, lambda 0.5; episode ends at t = 1, new one starts at t = 2
    r = np.array([1.0, 2.0, 3.0])
    v = np.array([0.5, 1.0, 2.0, 4.0])
    d = np.array([0.0, 1.0, 0.0])
    adv, ret = compute_gae(r, v, d, gamma=0.5, lam=0.5)
    delta = [1 + 0.5 * 1.0 - 0.5, 2 - 1.0, 3 + 0.5 * 4.0 - 2.0]
    expected = [delta[0] + 0.25 * delta[1], delta[1], delta[2]]
    np.testing.assert_allclose(adv, expected)
    np.testing.assert_allclose(ret, np.array(expected) + v[:-1])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-5, 5)), st.floats(0.0, 0.99), st.data())
def test_gae_with_unit_lambda_is_the_discounted_return(rewards, gamma, data):
    T = rewards.size
    values = data.draw(arrays(np.float64, T + 1, elements=st.floats(-5, 5)))
    dones = np.zeros(T)
    _, ret = compute_gae(rewards, values, dones, gamma, 1.0)
    expected = np.zeros(T)
    acc = values[-1]
    for t in reversed(range(T)):
        acc = rewards[t] + gamma * acc
        expected[t] = acc
    np.testing.assert_allclose(ret, expected, rtol=1e-9, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-5, 5)), arrays(np.float64, (7, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (6, 3), elements=st.sampled_from([0.0, 1.0])), st.floats(0.0, 0.99))
def test_gae_with_zero_lambda_is_the_td_error(rewards, values, dones, gamma):
    adv, _ = compute_gae(rewards, values, dones, gamma, 0.0)
    np.testing.assert_allclose(adv, rewards + gamma * (1 - dones) * values[1:] - values[:-1], atol=1e-12)


def test_gae_checks_lengths():
    with pytest.raises(ValueError):
        compute_gae(np.zeros(3), np.zeros(3), np.zeros(3), 0.9, 0.9)


def test_advantage_normalisation():
    adv = normalize_advantages(np.array([1.0, 2.0, 3.0, 6.0]))
    assert adv.mean() == pytest.approx(0.0, abs=1e-12) and adv.std() == pytest.approx(1.0)
    np.testing.assert_array_equal(normalize_advantages(np.full(3, 2.0)), 0.0)


def float64_policy(mode, rng):
    pol = ModulationPolicy(mode, 5, 2, hidden=(8, 8), rng=rng)
    pol.net = pol.net.astype(np.float64)
    pol.net.activations = ["tanh", "tanh", "identity"]
    pol.net.weights[-1] *= 50
    pol.log_std_a0 = pol.log_std_a0.astype(np.float64) + 0.1
    pol.log_std_ar = pol.log_std_ar.astype(np.float64) - 0.2
    return pol


@pytest.mark.parametrize("mode", ["rfs", "dsrl", "residual"])
def test_policy_loss_gradient(mode):
    rng = np.random.default_rng(0)
    pol = float64_policy(mode, rng)
    n = 12
    obs = rng.standard_normal((n, 5))
    mu0, mur = pol.means(obs)
    u0 = mu0 + rng.standard_normal((n, 2)) * 0.3
    ur = mur + rng.standard_normal((n, 2)) * 0.5
    adv = rng.standard_normal(n)
    # logp_old chosen so ratios sit clearly inside or outside the clip range
    logp_now = pol.gaussian_logp(obs, u0, ur)
    shifts = rng.choice([-0.5, 0.0, 0.5], size=n) + rng.uniform(-0.05, 0.05, n)
    logp_old = logp_now + shifts

    def f():
        return policy_loss(pol, obs, u0, ur, logp_old, adv, 0.2, entropy_coef=0.01)[0]

    _, grads, info = policy_loss(pol, obs, u0, ur, logp_old, adv, 0.2, entropy_coef=0.01)
    num = numeric_grad(f, pol.params())
    assert max_relative_error(grads, num) < 1e-4
    assert 0 < info["clip_frac"] < 1


def test_unit_ratio_gives_minus_mean_advantage():
    rng = np.random.default_rng(1)
    pol = float64_policy("rfs", rng)
    obs = rng.standard_normal((5, 5))
    u0, ur = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    adv = rng.standard_normal(5)
    loss, _, info = policy_loss(pol, obs, u0, ur, pol.gaussian_logp(obs, u0, ur), adv, 0.2)
    assert loss == pytest.approx(-adv.mean()) and info["mean_ratio"] == pytest.approx(1.0)


def test_value_loss_gradient():
    rng = np.random.default_rng(2)
    net = Mlp([5, 8, 8, 1], hidden_activation="tanh", rng=rng, dtype=np.float64)
    obs = rng.standard_normal((10, 5))
    ret = rng.standard_normal(10)
    loss, grads = value_loss(net, obs, ret, 0.5)
    assert loss == pytest.approx(0.5 * np.mean((net(obs)[:, 0] - ret) ** 2))
    num = numeric_grad(lambda: value_loss(net, obs, ret, 0.5)[0], net.params())
    assert max_relative_error(grads, num) < 1e-4


def test_config_defaults_and_validation():
    cfg = PPOConfig()
    assert (cfg.gamma, cfg.gae_lambda, cfg.clip_eps, cfg.minibatch_size) == (0.99, 0.95, 0.2, 1024)
    assert cfg.to_dict()["hidden"] == [256, 128, 64]
    with pytest.raises(ValueError):
        PPOConfig(gamma=1.0)
    with pytest.raises(ValueError):
        PPOConfig(clip_eps=0.0)


def tiny_config(**kw):
    base = dict(iterations=2, n_envs=4, rollout_len=10, minibatch_size=20, epochs_per_batch=2, hidden=(16, 16),
                eval_every=1, eval_episodes=8, final_eval_episodes=8, seed=3)
    base.update(kw)
    return PPOConfig(**base)


def test_training_records_one_row_per_iteration_and_leaves_the_field_alone(offset_field, schedule):
    spec = make_env("OffsetReach")
    before = offset_field.param_hash()
    rows = []
    res = train_online(spec, offset_field, "rfs", tiny_config(), schedule, callback=rows.append)
    assert offset_field.param_hash() == before
    assert [r["iteration"] for r in res.metrics] == [1, 2] and rows == res.metrics
    assert res.metrics[-1]["env_steps"] == 2 * 4 * 10
    assert all(np.isfinite(r["policy_loss"]) and np.isfinite(r["value_loss"]) for r in res.metrics)
    assert 0.0 <= res.final_success <= 1.0


def test_training_is_deterministic(offset_field, schedule):
    spec = make_env("OffsetReach")
    a = train_online(spec, offset_field, "residual", tiny_config(), schedule)
    b = train_online(spec, offset_field, "residual", tiny_config(), schedule)
    assert a.policy.net.param_hash() == b.policy.net.param_hash()
    np.testing.assert_equal(a.metrics, b.metrics)  # NaN compares equal here
