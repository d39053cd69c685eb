import numpy as np
import pytest

from app.engine import baselines, env
from app.engine.learner import gaussian_log_prob, policy_distribution, policy_network
from app.engine.nn import HeadKind, Mlp


def test_equal_split():
    np.testing.assert_allclose(baselines.equal_split([True, True, False, True]),
                               [[1 / 3, 1 / 3], [1 / 3, 1 / 3], [0, 0], [1 / 3, 1 / 3]])
    np.testing.assert_array_equal(baselines.equal_split([False, False]), 0.0)


def test_fairness_policy_serves_every_active_beam(scenario):
    world = env.reset(scenario, seed=0)
    for agent in world.sat_ids:
        action = baselines.fairness_policy(world, agent)
        active = world.active_mask(agent)
        if active.any():
            np.testing.assert_allclose(action.fractions[active].sum(axis=0), 1.0)
        np.testing.assert_array_equal(action.fractions[~active], 0.0)


def test_clipped_surrogate_values():
    ratio = np.array([0.5, 1.0, 1.5, 1.5, 0.5])
    adv = np.array([1.0, 2.0, 1.0, -1.0, -1.0])
    np.testing.assert_allclose(baselines.clipped_surrogate(ratio, adv, 0.2), [0.5, 2.0, 1.2, -1.5, -0.8])
    np.testing.assert_allclose(baselines.unclipped_surrogate(ratio, adv), ratio * adv)


def test_ppo_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    policy = policy_network(3, 2, [5], rng)
    states = rng.normal(size=(6, 3))
    mean, log_std = policy_distribution(policy, states)
    z = mean + np.exp(log_std) * rng.normal(size=mean.shape)
    # old policy slightly off so ratios differ from 1 but stay well inside the clip range
    old_log_prob = gaussian_log_prob(z, mean, log_std) + rng.uniform(-0.05, 0.05, size=6)
    adv = rng.normal(size=6)

    _, analytic = baselines.ppo_loss_and_grad(policy, states, z, old_log_prob, adv, 0.2, 0.01)

    base = policy.get_params()
    numeric = np.zeros_like(base)
    eps = 1e-6
    for i in range(base.size):
        for sign in (1.0, -1.0):
            p = base.copy()
            p[i] += sign * eps
            policy.set_params(p)
            numeric[i] += sign * baselines.ppo_loss_and_grad(policy, states, z, old_log_prob, adv, 0.2, 0.01)[0]
    numeric /= 2 * eps
    policy.set_params(base)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_clipped_samples_contribute_no_gradient():
    rng = np.random.default_rng(1)
    policy = policy_network(3, 2, [5], rng)
    states = rng.normal(size=(4, 3))
    mean, log_std = policy_distribution(policy, states)
    z = mean.copy()
    # ratio e^1 with positive advantage sits beyond 1 + clip
    old_log_prob = gaussian_log_prob(z, mean, log_std) - 1.0
    _, grad = baselines.ppo_loss_and_grad(policy, states, z, old_log_prob, np.ones(4), 0.2, 0.0)
    np.testing.assert_array_equal(grad, 0.0)


def test_gae_matches_hand_computation():
    rewards = np.array([1.0, 0.0, 2.0])
    values = np.array([0.5, 1.0, 0.0])
    gamma, lam = 0.9, 0.5
    d2 = 2.0 + 0.9 * 3.0 - 0.0
    d1 = 0.0 + 0.9 * 0.0 - 1.0
    d0 = 1.0 + 0.9 * 1.0 - 0.5
    a2 = d2
    a1 = d1 + gamma * lam * a2
    a0 = d0 + gamma * lam * a1
    advantages, returns = baselines.gae(rewards, values, 3.0, gamma, lam)
    np.testing.assert_allclose(advantages, [a0, a1, a2])
    np.testing.assert_allclose(returns, advantages + values)


def test_gae_with_unit_lambda_gives_discounted_returns():
    rewards = np.array([1.0, 2.0, 3.0])
    _, returns = baselines.gae(rewards, np.array([0.3, -0.2, 0.7]), 0.0, 0.5, 1.0)
    np.testing.assert_allclose(returns, [1 + 0.5 * 2 + 0.25 * 3, 2 + 0.5 * 3, 3])


def test_value_loss_gradient():
    value = Mlp([2, 1], HeadKind.linear)
    value.biases[-1][0] = 1.0
    states = np.array([[0.0, 0.0], [0.0, 0.0]])
    loss, grad = baselines.value_loss_and_grad(value, states, np.array([3.0, 5.0]), 0.5)
    # V = 1, residuals (-2, -4): loss 0.5 * 0.5 * mean(4, 16), bias gradient 0.5 * mean(-2, -4)
    assert loss == pytest.approx(2.5)
    np.testing.assert_allclose(grad, [0.0, 0.0, -1.5])


def test_ppo_train_runs(scenario, ppo_config):
    learners, curves = baselines.ppo_train(scenario, ppo_config, seed=0)
    assert sorted(learners) == [0, 1]
    assert [c.episode for c in curves] == [0, 1]
    assert all(c.disc_loss is None and np.isfinite(c.mean_reward) for c in curves)
    for learner in learners.values():
        assert learner.samples == 2 * scenario.episode.num_slots
        assert learner.gradient_steps > 0
        assert set(learner.networks()) == {"policy", "value"}
