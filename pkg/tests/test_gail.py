import math

import numpy as np
import pytest

from app.engine import expert, gail, nn
from app.engine.expert import Demonstration
from app.engine.learner import gaussian_log_prob, policy_distribution, policy_network
from app.engine.nn import HeadKind, Mlp
from app.exceptions import ConfigurationError
from app.schemas import WoaConfig


def _numeric_grad(net, loss_fn, eps=1e-6):
    base = net.get_params()
    grad = np.zeros_like(base)
    for i in range(base.size):
        for sign in (1.0, -1.0):
            p = base.copy()
            p[i] += sign * eps
            net.set_params(p)
            grad[i] += sign * loss_fn() / (2 * eps)
    net.set_params(base)
    return grad


def _demo(states, actions):
    return Demonstration(states=states, actions=actions, agent_ids=np.zeros(len(states), dtype=np.int32),
                         scenario_hash=bytes(32), seed=0, woa=WoaConfig())


@pytest.mark.parametrize("seed", range(50))
def test_discriminator_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    disc = gail.discriminator_network(3, 2, [6], rng)
    expert_x, policy_x = rng.normal(size=(5, 5)), rng.normal(size=(3, 5))
    _, analytic = gail.disc_loss_and_grad(disc, expert_x, policy_x)
    numeric = _numeric_grad(disc, lambda: gail.disc_loss_and_grad(disc, expert_x, policy_x)[0])
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("seed", range(50))
def test_generator_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(1000 + seed)
    policy = policy_network(3, 2, [5], rng)
    states, z, q = rng.normal(size=(4, 3)), rng.normal(size=(4, 2)), rng.normal(size=4)
    _, analytic = gail.gen_loss_and_grad(policy, states, z, q, 0.1)
    numeric = _numeric_grad(policy, lambda: gail.gen_loss_and_grad(policy, states, z, q, 0.1)[0])
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_zero_advantage_gives_no_gradient():
    rng = np.random.default_rng(2)
    policy = policy_network(3, 2, [5], rng)
    _, grad = gail.gen_loss_and_grad(policy, rng.normal(size=(4, 3)), rng.normal(size=(4, 2)),
                                     np.full(4, 3.5), entropy_coef=0.0)
    np.testing.assert_array_equal(grad, 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_replayed_generator_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(2000 + seed)
    policy = policy_network(3, 2, [5], rng)
    states, q = rng.normal(size=(4, 3)), rng.normal(size=4)
    mean, log_std = policy_distribution(policy, states)
    z = mean + np.exp(log_std) * rng.normal(size=mean.shape)
    behaviour = gaussian_log_prob(z, mean, log_std) + rng.uniform(-0.3, 0.3, size=4)
    _, analytic = gail.gen_loss_and_grad(policy, states, z, q, 0.1, behaviour)
    numeric = _numeric_grad(policy, lambda: gail.gen_loss_and_grad(policy, states, z, q, 0.1, behaviour)[0])
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_fresh_samples_need_no_correction():
    rng = np.random.default_rng(6)
    policy = policy_network(3, 2, [5], rng)
    states, q = rng.normal(size=(4, 3)), rng.normal(size=4)
    mean, log_std = policy_distribution(policy, states)
    z = mean + np.exp(log_std) * rng.normal(size=mean.shape)
    _, plain = gail.gen_loss_and_grad(policy, states, z, q, 0.1)
    _, weighted = gail.gen_loss_and_grad(policy, states, z, q, 0.1, gaussian_log_prob(z, mean, log_std))
    np.testing.assert_allclose(weighted, plain, rtol=1e-9, atol=1e-12)


def test_stale_samples_beyond_the_ratio_cap_are_ignored():
    rng = np.random.default_rng(7)
    policy = policy_network(3, 2, [5], rng)
    states, q = rng.normal(size=(4, 3)), rng.normal(size=4)
    mean, log_std = policy_distribution(policy, states)
    z = mean.copy()
    behaviour = gaussian_log_prob(z, mean, log_std) - 5.0
    _, grad = gail.gen_loss_and_grad(policy, states, z, q, 0.0, behaviour, max_ratio=10.0)
    np.testing.assert_array_equal(grad, 0.0)


def test_memory_keeps_behaviour_log_probs(scenario, woa_config, gail_config):
    demo = expert.generate_demonstrations(scenario, 1, woa_config, seed=0)
    result = gail.train(scenario, demo, gail_config, seed=0, episodes=1)
    for learner in result.learners.values():
        assert len(learner.memory) == scenario.episode.num_slots
        assert all(np.isfinite(t.log_prob) and t.log_prob != 0.0 for t in learner.memory)


def test_undecided_discriminator_rewards_ln2():
    disc = Mlp([4, 1], HeadKind.sigmoid)
    assert gail.gail_reward(disc, np.zeros(2), np.ones(2)) == pytest.approx(math.log(2.0))


def test_reward_of_one_at_d_equal_inverse_e():
    disc = Mlp([4, 1], HeadKind.sigmoid)
    disc.biases[-1][0] = -1.0 - math.log(1.0 - math.exp(-1.0))
    assert gail.gail_reward(disc, np.zeros(2), np.zeros(2)) == pytest.approx(1.0, rel=1e-12)


def test_rewards_are_positive():
    rng = np.random.default_rng(3)
    disc = gail.discriminator_network(3, 2, [8], rng)
    disc.set_params(rng.normal(scale=3.0, size=disc.num_params))
    assert np.all(gail.gail_rewards(disc, rng.normal(scale=5.0, size=(200, 5))) > 0)


def test_discriminator_rejects_empty_or_mismatched_batches():
    disc = gail.discriminator_network(3, 2, [4], np.random.default_rng(4))
    with pytest.raises(ConfigurationError):
        gail.disc_loss_and_grad(disc, np.zeros((0, 5)), np.zeros((2, 5)))
    with pytest.raises(ConfigurationError):
        gail.disc_loss_and_grad(disc, np.zeros((2, 5)), np.zeros((2, 4)))


def test_discriminator_learns_to_separate():
    rng = np.random.default_rng(5)
    disc = gail.discriminator_network(1, 1, [8], rng)
    opt = nn.OptimizerState.for_net(disc, 1e-2)
    expert_x = np.column_stack([rng.normal(-2.0, 0.3, 64), rng.normal(-2.0, 0.3, 64)])
    policy_x = np.column_stack([rng.normal(2.0, 0.3, 64), rng.normal(2.0, 0.3, 64)])
    first = gail.disc_loss_and_grad(disc, expert_x, policy_x)[0]
    for _ in range(300):
        last = gail.disc_update(disc, opt, expert_x, policy_x)
    assert last < first
    assert gail.gail_rewards(disc, expert_x).mean() > gail.gail_rewards(disc, policy_x).mean()


def test_memory_returns_follow_each_trajectory():
    disc = Mlp([3, 1], HeadKind.sigmoid)
    state, z, frac = np.zeros(1), np.zeros(2), np.zeros((1, 2))
    memory = [
        gail.PolicyTransition(0, 0, state, z, frac),
        gail.PolicyTransition(0, 1, state, z, frac),
        gail.PolicyTransition(0, 0, state, z, frac),
    ]
    ln2 = math.log(2.0)
    np.testing.assert_allclose(gail.memory_returns(disc, memory, 0.5), [1.5 * ln2, ln2, ln2])
    assert gail.memory_returns(disc, [], 0.5).size == 0


def test_trainer_validates_the_expert_memory(scenario, gail_config):
    with pytest.raises(ConfigurationError):
        gail.GailTrainer(scenario, _demo(np.zeros((0, 14)), np.zeros((0, 4))), gail_config, 0)
    with pytest.raises(ConfigurationError):
        gail.GailTrainer(scenario, _demo(np.zeros((3, 5)), np.zeros((3, 4))), gail_config, 0)


def test_expert_memory_is_read_only():
    memory = gail.ExpertMemory(_demo(np.ones((4, 2)), np.zeros((4, 2))))
    assert len(memory) == 4
    assert memory.sample(10, np.random.default_rng(0)).shape == (4, 4)
    with pytest.raises(ValueError):
        memory.pairs[0, 0] = 2.0


def test_train_produces_curves_and_updates(scenario, woa_config, gail_config):
    demo = expert.generate_demonstrations(scenario, 1, woa_config, seed=0)
    result = gail.train(scenario, demo, gail_config, seed=0)

    assert sorted(result.learners) == [0, 1]
    assert [c.episode for c in result.curves] == [0, 1]
    for curve in result.curves:
        assert curve.mean_reward > 0
        assert np.isfinite(curve.mean_se)
        assert curve.disc_loss is not None
    for learner in result.learners.values():
        assert learner.samples == 2 * scenario.episode.num_slots
        assert learner.gradient_steps == 2 * (scenario.episode.num_slots // gail_config.update_every)
        assert len(learner.memory) <= gail_config.gen_replay_buffer_capacity


def test_train_is_deterministic(scenario, woa_config, gail_config):
    demo = expert.generate_demonstrations(scenario, 1, woa_config, seed=0)
    a = gail.train(scenario, demo, gail_config, seed=7)
    b = gail.train(scenario, demo, gail_config, seed=7)
    for agent in a.learners:
        assert nn.params_hash(a.learners[agent].policy.get_params()) == \
            nn.params_hash(b.learners[agent].policy.get_params())
