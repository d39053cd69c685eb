"""
Module: learner.py
Description: This module holds what the imitation learner and the clipped-surrogate baseline
share: the Gaussian policy over unbounded action logits, per-agent learner state, the
per-slot rollout over the decision schedule, discounted returns and per-episode statistics.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from app.engine.env import AgentAction, SlotOutcome, World, apply_action_and_step, decision_schedule, observe, squash_action
from app.engine.nn import HeadKind, Mlp, OptimizerState

logger = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# (agent_id, state, active mask) -> (n_beam, 2) fractions
Companion = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


def policy_network(state_dim: int, action_dim: int, hidden: Sequence[int], rng: np.random.Generator) -> Mlp:
    return Mlp.init([state_dim, *hidden, 2 * action_dim], HeadKind.gaussian, rng)


def policy_distribution(policy: Mlp, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(mean, log_std) of the Gaussian over action logits, each (B, action_dim)."""
    out = policy.forward(np.atleast_2d(states))
    half = out.shape[1] // 2
    return out[:, :half], out[:, half:]


def gaussian_log_prob(z: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Log-density of each row of z."""
    var = np.exp(2.0 * log_std)
    return np.sum(-0.5 * (z - mean) ** 2 / var - log_std - HALF_LOG_2PI, axis=1)


def gaussian_entropy(log_std: np.ndarray) -> np.ndarray:
    return np.sum(log_std + 0.5 + HALF_LOG_2PI, axis=1)


def log_prob_grads(z: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """d log pi / d mean and d log pi / d log_std, row-wise."""
    var = np.exp(2.0 * log_std)
    diff = z - mean
    return diff / var, diff ** 2 / var - 1.0


def mean_action(policy: Mlp, state: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Deterministic fractions: the squashed policy mean."""
    mean, _ = policy_distribution(policy, state)
    return squash_action(mean[0], mask)


def policy_companion(policy: Mlp) -> Companion:
    """Act for agents without a learner with the mean of a frozen policy."""
    def act(agent_id: int, state: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return mean_action(policy, state, mask)
    return act


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    running = 0.0
    for i in reversed(range(len(rewards))):
        running = rewards[i] + gamma * running
        out[i] = running
    return out


@dataclass
class EpisodeStats:
    """One learning-curve row."""
    episode: int
    mean_reward: float
    mean_se: float
    disc_loss: Optional[float]
    entropy: float
    agent_id: Optional[int] = None


def curves_frame(stats: Sequence[EpisodeStats]) -> pd.DataFrame:
    return pd.DataFrame([vars(s) for s in stats],
                        columns=["episode", "agent_id", "mean_reward", "mean_se", "disc_loss", "entropy"])


@dataclass
class PolicyLearner:
    """
    Per-agent learner state that persists across federation rounds.

    Subclasses add their own networks and memories; `networks()` names every network that
    takes part in parameter exchange.
    """
    agent_id: int
    policy: Mlp
    policy_opt: OptimizerState
    rng: np.random.Generator
    samples: int = 0
    gradient_steps: int = 0

    def networks(self) -> Dict[str, Mlp]:
        return {"policy": self.policy}

    def act(self, state: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
        """Sample action logits; returns (z, fractions, log_prob)."""
        mean, log_std = policy_distribution(self.policy, state)
        z = mean[0] + np.exp(log_std[0]) * self.rng.standard_normal(mean.shape[1])
        log_prob = float(gaussian_log_prob(z[None, :], mean, log_std)[0])
        return z, squash_action(z, mask), log_prob

    def entropy(self, state: np.ndarray) -> float:
        _, log_std = policy_distribution(self.policy, state)
        return float(gaussian_entropy(log_std)[0])


@dataclass
class SlotStep:
    """What one agent saw and did in one slot."""
    agent_id: int
    state: np.ndarray
    z: Optional[np.ndarray]
    fractions: np.ndarray
    log_prob: float = 0.0
    mask: Optional[np.ndarray] = None


@dataclass
class SlotRecord:
    steps: List[SlotStep] = field(default_factory=list)
    outcome: Optional[SlotOutcome] = None


def rollout_slot(world: World, learners: Dict[int, PolicyLearner], companion: Companion,
                 deterministic: bool = False) -> SlotRecord:
    """
    Let every agent act once in schedule order and advance the world.

    Agents with a learner sample from (or, when deterministic, take the mean of) their own
    policy; the others follow the companion.
    """
    record = SlotRecord()
    actions = []
    for agent in decision_schedule(world):
        state = observe(world, agent)
        mask = world.active_mask(agent)
        learner = learners.get(agent)
        if learner is None:
            step = SlotStep(agent, state, None, companion(agent, state, mask), mask=mask)
        elif deterministic:
            step = SlotStep(agent, state, None, mean_action(learner.policy, state, mask), mask=mask)
        else:
            z, fractions, log_prob = learner.act(state, mask)
            step = SlotStep(agent, state, z, fractions, log_prob, mask)
        record.steps.append(step)
        actions.append(AgentAction(agent_id=agent, fractions=step.fractions))
    record.outcome = apply_action_and_step(world, actions)
    return record


class LocalTrainer(Protocol):
    """Training rule run by each agent between aggregation barriers."""

    def make_learner(self, agent_id: int) -> PolicyLearner: ...

    def train(self, learners: Dict[int, PolicyLearner], episodes: int, episode_offset: int = 0,
              companion: Optional[Companion] = None) -> List[EpisodeStats]: ...


def learner_rng(seed: int, agent_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, agent_id]))
