"""
Module: gail.py
Description: This module implements adversarial imitation of the expert. A discriminator learns
to output values near 0 for expert (state, action) pairs and near 1 for policy pairs, the policy
is rewarded with -ln D, and the generator follows a policy gradient on discounted discriminator
rewards with an entropy bonus. Each satellite owns one learner; updates run every
`update_every` slots on batches drawn from the expert memory and the agent's policy memory.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional

import numpy as np

from app.engine.baselines import fairness_companion
from app.engine.env import action_dim, reset, state_dim
from app.engine.expert import Demonstration
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
from app.exceptions import ConfigurationError, NumericalError
from app.schemas import GailConfig, ScenarioConfig

logger = logging.getLogger(__name__)


@dataclass
class PolicyTransition:
    """One stored policy step."""
    agent_id: int
    episode: int
    state: np.ndarray
    z: np.ndarray
    fractions: np.ndarray
    log_prob: float = 0.0  # under the policy that drew z

    def pair(self) -> np.ndarray:
        return np.concatenate([self.state, self.fractions.ravel()])


@dataclass
class GailLearner(PolicyLearner):
    """Policy, discriminator and policy memory of one satellite."""
    disc: Optional[Mlp] = None
    disc_opt: Optional[OptimizerState] = None
    memory: Deque[PolicyTransition] = field(default_factory=deque)

    def networks(self) -> Dict[str, Mlp]:
        return {"policy": self.policy, "disc": self.disc}


def discriminator_network(state_dim_: int, action_dim_: int, hidden, rng: np.random.Generator) -> Mlp:
    return Mlp.init([state_dim_ + action_dim_, *hidden, 1], HeadKind.sigmoid, rng)


def disc_loss_and_grad(disc: Mlp, expert_x: np.ndarray, policy_x: np.ndarray):
    """
    Binary cross-entropy with expert pairs labelled 0 and policy pairs labelled 1.

    L = -mean_E ln(1 - D) - mean_P ln D

    Returns:
        tuple: (loss, flat gradient).

    Raises:
        ConfigurationError: If a batch is empty or widths differ.
        NumericalError: If the loss is not finite.
    """
    expert_x, policy_x = np.atleast_2d(expert_x), np.atleast_2d(policy_x)
    if expert_x.shape[0] == 0 or policy_x.shape[0] == 0:
        raise ConfigurationError("discriminator batches must be non-empty")
    if expert_x.shape[1] != policy_x.shape[1]:
        raise ConfigurationError("expert and policy pairs have different widths")
    d_e = disc.forward(expert_x)[:, 0]
    d_p = disc.forward(policy_x)[:, 0]
    n, m = d_e.size, d_p.size
    loss = float(-np.mean(np.log1p(-d_e)) - np.mean(np.log(d_p)))
    if not np.isfinite(loss):
        raise NumericalError(
            f"discriminator loss is not finite (expert batch {n}, policy batch {m}, "
            f"D expert in [{d_e.min():.3g}, {d_e.max():.3g}], D policy in [{d_p.min():.3g}, {d_p.max():.3g}])"
        )
    grad = disc.backward(expert_x, (1.0 / (n * (1.0 - d_e)))[:, None])
    grad = grad + disc.backward(policy_x, (-1.0 / (m * d_p))[:, None])
    return loss, grad


def disc_update(disc: Mlp, opt: OptimizerState, expert_batch: np.ndarray, policy_batch: np.ndarray) -> float:
    """One optimizer step on the discriminator; returns the post-step loss."""
    _, grad = disc_loss_and_grad(disc, expert_batch, policy_batch)
    disc.set_params(step(opt, disc.get_params(), grad))
    loss, _ = disc_loss_and_grad(disc, expert_batch, policy_batch)
    return loss


def gail_rewards(disc: Mlp, pairs: np.ndarray) -> np.ndarray:
    """-ln D for every (state, action) row."""
    return -np.log(disc.forward(np.atleast_2d(pairs))[:, 0])


def gail_reward(disc: Mlp, state, action) -> float:
    """r(s, a) = -ln D(s, a); positive because D lies strictly inside (0, 1)."""
    pair = np.concatenate([np.ravel(state), np.ravel(action)])
    return float(gail_rewards(disc, pair)[0])


def gen_loss_and_grad(policy: Mlp, states: np.ndarray, z: np.ndarray, q_values: np.ndarray,
                      entropy_coef: float, behaviour_log_prob: Optional[np.ndarray] = None,
                      max_ratio: float = 10.0):
    """
    Policy-gradient surrogate with a mean baseline and an entropy bonus.

    L = -mean[ln pi(z|s) * (Q - mean Q)] - c * mean H(pi(.|s))

    When the log-probabilities of the policy that drew `z` are given, replayed samples are
    importance weighted instead: L = -mean[min(rho, max_ratio) * (Q - mean Q)] - c * mean H with
    rho = pi(z|s) / pi_old(z|s). Samples whose ratio is truncated contribute no policy gradient.

    Returns:
        tuple: (loss, flat gradient).
    """
    states, z = np.atleast_2d(states), np.atleast_2d(z)
    q = np.asarray(q_values, dtype=float)
    n = q.size
    mean, log_std = policy_distribution(policy, states)
    advantage = q - q.mean()
    log_prob = gaussian_log_prob(z, mean, log_std)
    entropy = gaussian_entropy(log_std)
    if behaviour_log_prob is None:
        objective = log_prob * advantage
        coef = advantage
    else:
        ratio = np.exp(np.minimum(log_prob - np.asarray(behaviour_log_prob, dtype=float), 50.0))
        objective = np.minimum(ratio, max_ratio) * advantage
        coef = np.where(ratio < max_ratio, ratio * advantage, 0.0)
    loss = float(-np.mean(objective) - entropy_coef * np.mean(entropy))

    d_mean, d_log_std = log_prob_grads(z, mean, log_std)
    weight = (-coef / n)[:, None]
    upstream = np.concatenate([weight * d_mean, weight * d_log_std - entropy_coef / n], axis=1)
    return loss, policy.backward(states, upstream)


def gen_update(policy: Mlp, opt: OptimizerState, states: np.ndarray, z: np.ndarray, q_values: np.ndarray,
               entropy_coef: float, behaviour_log_prob: Optional[np.ndarray] = None,
               max_ratio: float = 10.0) -> Dict[str, float]:
    """
    One optimizer step on the policy.

    Returns:
        dict: mean_return, entropy, grad_norm and loss of the batch.
    """
    loss, grad = gen_loss_and_grad(policy, states, z, q_values, entropy_coef, behaviour_log_prob, max_ratio)
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite generator gradient on a batch of {len(q_values)}")
    _, log_std = policy_distribution(policy, states)
    diagnostics = {
        "mean_return": float(np.mean(q_values)),
        "entropy": float(np.mean(gaussian_entropy(log_std))),
        "grad_norm": float(np.linalg.norm(grad)),
        "loss": loss,
    }
    policy.set_params(step(opt, policy.get_params(), grad))
    return diagnostics


def memory_returns(disc: Mlp, memory: List[PolicyTransition], gamma: float) -> np.ndarray:
    """Discounted discriminator returns along each (agent, episode) trajectory held in memory."""
    if not memory:
        return np.zeros(0)
    rewards = gail_rewards(disc, np.stack([t.pair() for t in memory]))
    out = np.zeros(len(memory))
    running: Dict[tuple, float] = {}
    for i in reversed(range(len(memory))):
        key = (memory[i].agent_id, memory[i].episode)
        running[key] = rewards[i] + gamma * running.get(key, 0.0)
        out[i] = running[key]
    return out


class ExpertMemory:
    """Read-only expert pairs."""

    def __init__(self, demo: Demonstration):
        self.pairs = np.hstack([demo.states, demo.actions])
        self.pairs.setflags(write=False)

    def __len__(self) -> int:
        return self.pairs.shape[0]

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self), size=min(size, len(self)), replace=False)
        return self.pairs[np.sort(idx)]


class GailTrainer:
    """Runs imitation episodes for a set of learners on one scenario."""

    def __init__(self, scenario: ScenarioConfig, expert: Demonstration, config: GailConfig, seed: int):
        if len(expert) == 0:
            raise ConfigurationError("the expert memory is empty")
        if expert.state_dim != state_dim(scenario) or expert.action_dim != action_dim(scenario):
            raise ConfigurationError(
                f"demonstrations have dims ({expert.state_dim}, {expert.action_dim}), "
                f"the scenario needs ({state_dim(scenario)}, {action_dim(scenario)})"
            )
        self.scenario = scenario
        self.expert = ExpertMemory(expert)
        self.config = config
        self.seed = seed

    def make_learner(self, agent_id: int) -> GailLearner:
        rng = learner_rng(self.seed, agent_id)
        s_dim, a_dim = state_dim(self.scenario), action_dim(self.scenario)
        policy = policy_network(s_dim, a_dim, self.config.hidden, rng)
        disc = discriminator_network(s_dim, a_dim, self.config.hidden, rng)
        return GailLearner(
            agent_id=agent_id,
            policy=policy,
            policy_opt=OptimizerState.for_net(policy, self.config.learning_rate),
            rng=rng,
            disc=disc,
            disc_opt=OptimizerState.for_net(disc, self.config.disc_learning_rate),
            memory=deque(maxlen=self.config.gen_replay_buffer_capacity),
        )

    def update(self, learner: GailLearner) -> float:
        """Discriminator step then generator step; returns the discriminator loss."""
        config = self.config
        memory = list(learner.memory)
        idx = np.sort(learner.rng.choice(len(memory), size=min(config.demo_batch_size, len(memory)), replace=False))
        policy_pairs = np.stack([memory[i].pair() for i in idx])
        expert_pairs = self.expert.sample(config.demo_batch_size, learner.rng)
        loss = disc_update(learner.disc, learner.disc_opt, expert_pairs, policy_pairs)

        q = memory_returns(learner.disc, memory, config.gamma)[idx]
        states = np.stack([memory[i].state for i in idx])
        z = np.stack([memory[i].z for i in idx])
        behaviour = np.array([memory[i].log_prob for i in idx])
        diagnostics = gen_update(learner.policy, learner.policy_opt, states, z, q, config.entropy_coef,
                                 behaviour, config.max_importance_ratio)
        learner.gradient_steps += 1
        logger.debug("Agent %s update %s: disc_loss=%.4f %s", learner.agent_id, learner.gradient_steps,
                     loss, diagnostics)
        return loss

    def train(self, learners: Dict[int, GailLearner], episodes: int, episode_offset: int = 0,
              companion: Optional[Companion] = None) -> List[EpisodeStats]:
        """
        Roll out and update for `episodes` episodes.

        Episode e is reset with seed + episode_offset + e. Agents without a learner follow the
        companion (equal split by default).
        """
        companion = companion or fairness_companion
        update_every = self.config.update_every
        stats = []
        for e in range(episodes):
            index = episode_offset + e
            world = reset(self.scenario, self.seed + index)
            rewards, entropies, gammas, losses = [], [], [], []
            while not world.done:
                record = rollout_slot(world, learners, companion)
                gammas.append(record.outcome.gamma_tot)
                for s in record.steps:
                    learner = learners.get(s.agent_id)
                    if learner is None:
                        continue
                    transition = PolicyTransition(s.agent_id, index, s.state, s.z, s.fractions, s.log_prob)
                    learner.memory.append(transition)
                    learner.samples += 1
                    rewards.append(float(gail_rewards(learner.disc, transition.pair())[0]))
                    entropies.append(learner.entropy(s.state))
                if world.slot % update_every == 0:
                    losses.extend(self.update(learners[a]) for a in sorted(learners))
            stats.append(EpisodeStats(
                episode=index,
                mean_reward=float(np.mean(rewards)) if rewards else 0.0,
                mean_se=float(np.mean(gammas)),
                disc_loss=float(np.mean(losses)) if losses else None,
                entropy=float(np.mean(entropies)) if entropies else 0.0,
                agent_id=next(iter(learners)) if len(learners) == 1 else None,
            ))
            logger.info("GAIL episode %s: mean_se=%.4f mean_reward=%.4f", index, stats[-1].mean_se,
                        stats[-1].mean_reward)
        return stats


@dataclass
class GailResult:
    learners: Dict[int, GailLearner]
    curves: List[EpisodeStats]


def train(scenario: ScenarioConfig, expert: Demonstration, config: GailConfig, seed: int,
          episodes: Optional[int] = None, learners: Optional[Dict[int, GailLearner]] = None) -> GailResult:
    """
    Train one learner per satellite jointly in a shared environment.

    Raises:
        ConfigurationError: If the expert memory is empty or its dims do not match the scenario.
    """
    trainer = GailTrainer(scenario, expert, config, seed)
    if learners is None:
        learners = {s: trainer.make_learner(s) for s in range(scenario.constellation.num_sats)}
    episodes = config.episodes if episodes is None else episodes
    return GailResult(learners=learners, curves=trainer.train(learners, episodes))
