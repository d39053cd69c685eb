"""
Module: baselines.py
Description: This module provides the comparison policies: the equal-split fairness policy and
a clipped-surrogate actor-critic learner trained on the handcrafted penalized reward. The
learner shares the observation and action encodings, the policy shape and the federation
wrapper of the imitation learner.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from app.engine.env import ACTION_FEATURES, AgentAction, World, handcrafted_reward, observe, reset, state_dim, action_dim
from app.engine.learner import (
    Companion,
    EpisodeStats,
    PolicyLearner,
    gaussian_entropy,
    gaussian_log_prob,
    learner_rng,
    log_prob_grads,
    policy_distribution,
    policy_network,
    rollout_slot,
)
from app.engine.nn import HeadKind, Mlp, OptimizerState, step
from app.schemas import PpoConfig, ScenarioConfig

logger = logging.getLogger(__name__)

ADVANTAGE_EPS = 1e-8


def equal_split(mask) -> np.ndarray:
    """1/n power and spectrum on each of the n active slots."""
    mask = np.asarray(mask, dtype=bool)
    fractions = np.zeros((mask.size, ACTION_FEATURES))
    n = int(mask.sum())
    if n:
        fractions[mask] = 1.0 / n
    return fractions


def fairness_policy(world: World, agent_id: int) -> AgentAction:
    """Equal share of power and spectrum for every RUE the agent serves."""
    return AgentAction(agent_id=agent_id, fractions=equal_split(world.active_mask(agent_id)))


def fairness_companion(agent_id: int, state: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return equal_split(mask)


def clipped_surrogate(ratio: np.ndarray, advantages: np.ndarray, clip: float) -> np.ndarray:
    return np.minimum(ratio * advantages, np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantages)


def unclipped_surrogate(ratio: np.ndarray, advantages: np.ndarray) -> np.ndarray:
    return ratio * advantages


def ppo_loss_and_grad(policy: Mlp, states: np.ndarray, z: np.ndarray, old_log_prob: np.ndarray,
                      advantages: np.ndarray, clip: float, entropy_coef: float = 0.0):
    """
    Clipped-surrogate policy loss.

    L = -mean[min(r*A, clip(r, 1-eps, 1+eps)*A)] - c * mean H, with r = pi(z|s) / pi_old(z|s).

    Returns:
        tuple: (loss, flat gradient).
    """
    states, z = np.atleast_2d(states), np.atleast_2d(z)
    adv = np.asarray(advantages, dtype=float)
    n = adv.size
    mean, log_std = policy_distribution(policy, states)
    log_prob = gaussian_log_prob(z, mean, log_std)
    ratio = np.exp(log_prob - old_log_prob)
    surrogate = clipped_surrogate(ratio, adv, clip)
    entropy = gaussian_entropy(log_std)
    loss = float(-np.mean(surrogate) - entropy_coef * np.mean(entropy))

    # the min() follows the unclipped term whenever it is the smaller one
    active = ratio * adv <= np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    d_log_prob = np.where(active, -adv * ratio / n, 0.0)[:, None]
    d_mean, d_log_std = log_prob_grads(z, mean, log_std)
    upstream = np.concatenate([d_log_prob * d_mean, d_log_prob * d_log_std - entropy_coef / n], axis=1)
    return loss, policy.backward(states, upstream)


def value_loss_and_grad(value: Mlp, states: np.ndarray, returns: np.ndarray, value_coef: float):
    """Scaled squared error value_coef * 0.5 * mean((V - G)^2)."""
    v = value.forward(np.atleast_2d(states))[:, 0]
    diff = v - returns
    loss = float(value_coef * 0.5 * np.mean(diff ** 2))
    return loss, value.backward(np.atleast_2d(states), (value_coef * diff / diff.size)[:, None])


def gae(rewards: np.ndarray, values: np.ndarray, last_value: float, gamma: float, lam: float):
    """
    Generalized advantage estimates along one trajectory.

    Returns:
        tuple: (advantages, returns) where returns = advantages + values.
    """
    n = len(rewards)
    advantages = np.zeros(n)
    running = 0.0
    for i in reversed(range(n)):
        next_value = values[i + 1] if i + 1 < n else last_value
        delta = rewards[i] + gamma * next_value - values[i]
        running = delta + gamma * lam * running
        advantages[i] = running
    return advantages, advantages + np.asarray(values)


@dataclass
class PpoLearner(PolicyLearner):
    """Policy and value networks of one satellite."""
    value: Optional[Mlp] = None
    value_opt: Optional[OptimizerState] = None

    def networks(self) -> Dict[str, Mlp]:
        return {"policy": self.policy, "value": self.value}


@dataclass
class Rollout:
    states: List[np.ndarray] = field(default_factory=list)
    z: List[np.ndarray] = field(default_factory=list)
    log_probs: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards)


class PpoTrainer:
    """Runs clipped-surrogate episodes for a set of learners on one scenario."""

    def __init__(self, scenario: ScenarioConfig, config: PpoConfig, seed: int):
        self.scenario = scenario
        self.config = config
        self.seed = seed

    def make_learner(self, agent_id: int) -> PpoLearner:
        rng = learner_rng(self.seed, agent_id)
        s_dim = state_dim(self.scenario)
        policy = policy_network(s_dim, action_dim(self.scenario), self.config.hidden, rng)
        value = Mlp.init([s_dim, *self.config.hidden, 1], HeadKind.linear, rng)
        return PpoLearner(
            agent_id=agent_id,
            policy=policy,
            policy_opt=OptimizerState.for_net(policy, self.config.learning_rate),
            rng=rng,
            value=value,
            value_opt=OptimizerState.for_net(value, self.config.learning_rate),
        )

    def update(self, learner: PpoLearner, rollout: Rollout, last_value: float) -> None:
        config = self.config
        states = np.stack(rollout.states)
        z = np.stack(rollout.z)
        old_log_prob = np.asarray(rollout.log_probs)
        advantages, returns = gae(np.asarray(rollout.rewards), np.asarray(rollout.values), last_value,
                                  config.gamma, config.gae_lambda)
        advantages = (advantages - advantages.mean()) / (advantages.std() + ADVANTAGE_EPS)
        n = len(rollout)
        for _ in range(config.epochs):
            order = learner.rng.permutation(n)
            for start in range(0, n, config.minibatch_size):
                idx = order[start:start + config.minibatch_size]
                _, grad = ppo_loss_and_grad(learner.policy, states[idx], z[idx], old_log_prob[idx],
                                            advantages[idx], config.clip, config.entropy_coef)
                learner.policy.set_params(step(learner.policy_opt, learner.policy.get_params(), grad))
                _, v_grad = value_loss_and_grad(learner.value, states[idx], returns[idx], config.value_coef)
                learner.value.set_params(step(learner.value_opt, learner.value.get_params(), v_grad))
                learner.gradient_steps += 1

    def train(self, learners: Dict[int, PpoLearner], episodes: int, episode_offset: int = 0,
              companion: Optional[Companion] = None) -> List[EpisodeStats]:
        """
        Roll out and update for `episodes` episodes; every learner receives the shared slot reward.
        """
        companion = companion or fairness_companion
        horizon = self.config.rollout_slots or self.scenario.episode.num_slots
        stats = []
        for e in range(episodes):
            index = episode_offset + e
            world = reset(self.scenario, self.seed + index)
            buffers = {a: Rollout() for a in learners}
            rewards, gammas, entropies = [], [], []
            while not world.done:
                record = rollout_slot(world, learners, companion)
                reward = handcrafted_reward(record.outcome, self.config.penalty)
                rewards.append(reward)
                gammas.append(record.outcome.gamma_tot)
                for s in record.steps:
                    learner = learners.get(s.agent_id)
                    if learner is None:
                        continue
                    buf = buffers[s.agent_id]
                    buf.states.append(s.state)
                    buf.z.append(s.z)
                    buf.log_probs.append(s.log_prob)
                    buf.values.append(float(learner.value.forward(s.state)[0]))
                    buf.rewards.append(reward)
                    learner.samples += 1
                    entropies.append(learner.entropy(s.state))
                if world.done or world.slot % horizon == 0:
                    for a in sorted(learners):
                        if not len(buffers[a]):
                            continue
                        last = 0.0 if world.done else float(learners[a].value.forward(observe(world, a))[0])
                        self.update(learners[a], buffers[a], last)
                        buffers[a] = Rollout()
            stats.append(EpisodeStats(
                episode=index,
                mean_reward=float(np.mean(rewards)),
                mean_se=float(np.mean(gammas)),
                disc_loss=None,
                entropy=float(np.mean(entropies)) if entropies else 0.0,
                agent_id=next(iter(learners)) if len(learners) == 1 else None,
            ))
            logger.info("PPO episode %s: mean_se=%.4f mean_reward=%.4f", index, stats[-1].mean_se,
                        stats[-1].mean_reward)
        return stats


def ppo_train(scenario: ScenarioConfig, config: PpoConfig, seed: int, episodes: Optional[int] = None,
              learners: Optional[Dict[int, PpoLearner]] = None):
    """Train one clipped-surrogate learner per satellite jointly; returns (learners, curves)."""
    trainer = PpoTrainer(scenario, config, seed)
    if learners is None:
        learners = {s: trainer.make_learner(s) for s in range(scenario.constellation.num_sats)}
    episodes = config.episodes if episodes is None else episodes
    return learners, trainer.train(learners, episodes)
