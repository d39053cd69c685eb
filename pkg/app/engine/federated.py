"""
Module: federated.py
Description: This module orchestrates federated training across satellite agents. Each round
the server broadcasts the global networks, every participating agent trains locally in its own
replica of the environment (other satellites follow the broadcast policy), uploads its
parameters, and the server aggregates them with FedAvg before broadcasting again. Rounds stop
after a fixed count or once the global parameters settle.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from app.engine.learner import EpisodeStats, LocalTrainer, PolicyLearner, policy_companion
from app.engine.nn import Mlp, ParamVector, params_hash, weighted_average
from app.exceptions import ConfigurationError, FederationError
from app.schemas import FederationConfig, WeightsMode

logger = logging.getLogger(__name__)


@dataclass
class LocalUpdate:
    """Upload of one agent at an aggregation barrier."""
    agent_id: int
    params: Dict[str, ParamVector]
    samples: int
    curves: List[EpisodeStats] = field(default_factory=list)


@dataclass
class FederationRoundLog:
    """What happened at one aggregation barrier."""
    round_index: int
    weights: Dict[int, float]
    pre_hashes: Dict[int, str]
    post_hashes: Dict[int, str]
    post_hash: str
    duration_s: float
    distance: float
    samples: Dict[int, int]


@dataclass
class FederationResult:
    global_params: Dict[str, ParamVector]
    learners: Dict[int, PolicyLearner]
    logs: List[FederationRoundLog]
    curves: List[EpisodeStats]
    converged_round: Optional[int] = None

    @property
    def global_policy(self) -> Mlp:
        net = next(iter(self.learners.values())).policy.copy()
        net.set_params(self.global_params["policy"])
        return net


def local_round(trainer: LocalTrainer, learner: PolicyLearner, episodes: int, episode_offset: int,
                global_policy: Optional[Mlp] = None) -> LocalUpdate:
    """
    Train one agent locally.

    The learner keeps its optimizer state, memory and random stream across rounds; satellites
    other than the learner follow the mean of the broadcast global policy.

    Returns:
        LocalUpdate: Parameters after training and the number of samples collected.
    """
    learner.samples = 0
    companion = policy_companion(global_policy) if global_policy is not None else None
    curves = trainer.train({learner.agent_id: learner}, episodes, episode_offset, companion)
    return LocalUpdate(
        agent_id=learner.agent_id,
        params={name: net.get_params() for name, net in learner.networks().items()},
        samples=learner.samples,
        curves=curves,
    )


def client_weights(samples: Mapping[int, int], mode: WeightsMode) -> Dict[int, float]:
    """
    FedAvg weights: 1/K each, or M_k / M.

    With batch weights and no samples at all, equal weights are used.
    """
    agents = sorted(samples)
    if not agents:
        raise ConfigurationError("no agents to weight")
    total = sum(samples[a] for a in agents)
    if WeightsMode(mode) is WeightsMode.batch:
        if total > 0:
            return {a: samples[a] / total for a in agents}
        logger.warning("No samples were collected this round; falling back to equal weights")
    return {a: 1.0 / len(agents) for a in agents}


def aggregate(params: Mapping[int, ParamVector], weights: Mapping[int, float]) -> ParamVector:
    """
    Weighted average of agent parameter vectors in agent-id order.

    Raises:
        ConfigurationError: If the agents' layouts differ or a weight is missing.
    """
    agents = sorted(params)
    sizes = {a: np.shape(params[a]) for a in agents}
    if len(set(sizes.values())) > 1:
        raise ConfigurationError(f"parameter layouts differ across agents: {sizes}")
    missing = [a for a in agents if a not in weights]
    if missing:
        raise ConfigurationError(f"no weight for agents {missing}")
    return weighted_average([params[a] for a in agents], [weights[a] for a in agents])


def _broadcast(learners: Mapping[int, PolicyLearner], global_params: Mapping[str, ParamVector]) -> None:
    for learner in learners.values():
        nets = learner.networks()
        for name, vec in global_params.items():
            nets[name].set_params(vec)


def _distance(a: Mapping[str, ParamVector], b: Mapping[str, ParamVector]) -> float:
    return float(np.sqrt(sum(np.sum((a[name] - b[name]) ** 2) for name in sorted(a))))


def run_federation(trainer: LocalTrainer, num_agents: int, config: FederationConfig, total_rounds: int) -> FederationResult:
    """
    Run barrier-synchronized federated training.

    Args:
        trainer (LocalTrainer): Local training rule (imitation or clipped surrogate).
        num_agents (int): Number of satellites.
        config (FederationConfig): Aggregation interval, weighting, participants and convergence check.
        total_rounds (int): Maximum number of rounds.

    Returns:
        FederationResult: Global parameters, learners, round logs and learning curves.

    Raises:
        FederationError: If any agent fails during a round; nothing is aggregated for that round.
    """
    participants = sorted(config.participants) if config.participants is not None else list(range(num_agents))
    unknown = [a for a in participants if not 0 <= a < num_agents]
    if unknown or not participants:
        raise ConfigurationError(f"invalid participants {config.participants}")
    learners = {a: trainer.make_learner(a) for a in participants}
    shared = [name for name in learners[participants[0]].networks()
              if config.aggregate_discriminator or name != "disc"]
    global_params = {name: learners[participants[0]].networks()[name].get_params() for name in shared}

    logs: List[FederationRoundLog] = []
    curves: List[EpisodeStats] = []
    settled = 0
    converged_round = None
    for r in range(total_rounds):
        _broadcast(learners, global_params)
        frozen = learners[participants[0]].policy.copy()
        frozen.set_params(global_params["policy"])
        offset = r * config.aggregation_interval
        started = time.perf_counter()

        def work(agent_id: int) -> LocalUpdate:
            return local_round(trainer, learners[agent_id], config.aggregation_interval, offset, frozen)

        try:
            if config.max_workers > 1:
                with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
                    updates = list(pool.map(work, participants))
            else:
                updates = [work(a) for a in participants]
        except Exception as e:
            logger.error("Round %s aborted: %s", r, e)
            raise FederationError(f"round {r} aborted: {e}") from e

        samples = {u.agent_id: u.samples for u in updates}
        weights = client_weights(samples, config.weights_mode)
        pre_hashes = {u.agent_id: params_hash(u.params["policy"]) for u in updates}
        new_global = {name: aggregate({u.agent_id: u.params[name] for u in updates}, weights) for name in shared}
        _broadcast(learners, new_global)
        post_hashes = {a: params_hash(learners[a].policy.get_params()) for a in participants}

        distance = _distance(new_global, global_params)
        global_params = new_global
        for u in updates:
            curves.extend(u.curves)
        logs.append(FederationRoundLog(
            round_index=r,
            weights=weights,
            pre_hashes=pre_hashes,
            post_hashes=post_hashes,
            post_hash=params_hash(global_params["policy"]),
            duration_s=time.perf_counter() - started,
            distance=distance,
            samples=samples,
        ))
        logger.info("Round %s aggregated %s uploads, distance %.3g", r, len(updates), distance)

        settled = settled + 1 if distance < config.convergence_tol else 0
        if settled >= config.convergence_window:
            converged_round = r
            logger.info("Global parameters settled after round %s", r)
            break

    return FederationResult(global_params=global_params, learners=learners, logs=logs, curves=curves,
                            converged_round=converged_round)


def mean_curves(curves: Sequence[EpisodeStats]) -> List[EpisodeStats]:
    """Average per-agent curve rows by episode."""
    by_episode: Dict[int, List[EpisodeStats]] = {}
    for row in curves:
        by_episode.setdefault(row.episode, []).append(row)
    out = []
    for episode in sorted(by_episode):
        rows = by_episode[episode]
        losses = [r.disc_loss for r in rows if r.disc_loss is not None]
        out.append(EpisodeStats(
            episode=episode,
            mean_reward=float(np.mean([r.mean_reward for r in rows])),
            mean_se=float(np.mean([r.mean_se for r in rows])),
            disc_loss=float(np.mean(losses)) if losses else None,
            entropy=float(np.mean([r.entropy for r in rows])),
            agent_id=rows[0].agent_id if len(rows) == 1 else None,
        ))
    return out
