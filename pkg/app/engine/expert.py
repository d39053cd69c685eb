"""
Module: expert.py
Description: This module provides the expert policy: a whale optimization search over the joint
power/spectrum fractions of every satellite for one slot, the demonstration generator that
records (observation, expert action) pairs along expert-driven episodes, and the binary
demonstration file format.
"""

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from app.engine.env import (
    ACTION_FEATURES,
    AgentAction,
    SlotOutcome,
    World,
    action_dim,
    apply_action_and_step,
    decision_schedule,
    evaluate_allocation,
    observe,
    reset,
    state_dim,
)
from app.exceptions import ConfigurationError, FileFormatError
from app.schemas import ScenarioConfig, WoaConfig

logger = logging.getLogger(__name__)

DEMO_MAGIC = b"LFDM"
DEMO_VERSION = 1
_DEMO_HEADER = struct.Struct("<4sHIIIq")
_WOA_BLOCK = struct.Struct("<IIdd")


@dataclass
class WoaResult:
    """Best-ever solution of a whale optimization run."""
    position: np.ndarray
    fitness: float
    history: List[float] = field(default_factory=list)  # best-ever fitness after each iteration
    evaluations: int = 0


def woa_maximize(fitness_fn: Callable[[np.ndarray], float], dim: int, population: int, iterations: int,
                 rng: np.random.Generator, spiral_b: float = 1.0) -> WoaResult:
    """
    Maximize a fitness over the unit box with the whale optimization algorithm.

    Each iteration, a = 2 - 2*it/iterations. A whale draws A = 2a*r1 - a and C = 2*r2; with
    probability 1/2 it encircles the best whale (|A| < 1) or a random whale (|A| >= 1),
    otherwise it follows the logarithmic spiral D*exp(b*l)*cos(2*pi*l) + best, l ~ U(-1, 1).
    Positions are clipped to [0, 1].

    Args:
        fitness_fn (Callable): Maps a position to a finite fitness.
        dim (int): Search dimension.
        population (int): Number of whales (>= 2).
        iterations (int): Number of iterations; 0 returns the best initial whale.
        rng (np.random.Generator): Random source.
        spiral_b (float): Spiral shape constant.

    Returns:
        WoaResult: Best-ever position, fitness and per-iteration history.
    """
    if population < 2:
        raise ConfigurationError("whale optimization needs a population of at least 2")
    whales = rng.uniform(0.0, 1.0, size=(population, dim))
    fitness = np.array([fitness_fn(w) for w in whales])
    evaluations = population
    best = int(np.argmax(fitness))
    best_pos, best_fit = whales[best].copy(), float(fitness[best])
    history = []

    for it in range(iterations):
        a = 2.0 - 2.0 * it / iterations
        updated = np.empty_like(whales)
        for i in range(population):
            r1, r2, p, l = rng.random(), rng.random(), rng.random(), rng.uniform(-1.0, 1.0)
            A = 2.0 * a * r1 - a
            C = 2.0 * r2
            if p < 0.5:
                leader = best_pos if abs(A) < 1.0 else whales[rng.integers(population)]
                updated[i] = leader - A * np.abs(C * leader - whales[i])
            else:
                distance = np.abs(best_pos - whales[i])
                updated[i] = distance * math.exp(spiral_b * l) * math.cos(2.0 * math.pi * l) + best_pos
        whales = np.clip(updated, 0.0, 1.0)
        fitness = np.array([fitness_fn(w) for w in whales])
        evaluations += population
        best = int(np.argmax(fitness))
        if fitness[best] > best_fit:
            best_pos, best_fit = whales[best].copy(), float(fitness[best])
        history.append(best_fit)

    return WoaResult(position=best_pos, fitness=best_fit, history=history, evaluations=evaluations)


@dataclass
class ExpertSolution:
    """Expert fractions for every satellite in one slot."""
    actions: Dict[int, np.ndarray]
    fitness: float
    outcome: SlotOutcome


def decode_position(world: World, position: np.ndarray) -> Dict[int, np.ndarray]:
    """Spread a flat position over the agents' active beam slots and repair each budget."""
    out, offset = {}, 0
    for agent in decision_schedule(world):
        n = len(world.beam_slots.get(agent, []))
        fractions = np.zeros((world.n_beam, ACTION_FEATURES))
        fractions[:n] = np.asarray(position[offset:offset + n * ACTION_FEATURES]).reshape(n, ACTION_FEATURES)
        offset += n * ACTION_FEATURES
        out[agent] = fractions / np.maximum(1.0, fractions.sum(axis=0, keepdims=True))
    return out


def expert_fitness(outcome: SlotOutcome, penalty_weight: float) -> float:
    """Total spectrum efficiency minus the weighted sum of violation magnitudes."""
    return outcome.gamma_tot - penalty_weight * sum(outcome.violation_totals())


def woa_solve(world: World, iterations: int, population: int, seed, penalty_weight: float = 10.0,
              spiral_b: float = 1.0) -> ExpertSolution:
    """
    Solve one slot's joint allocation for every satellite.

    Args:
        world (World): Current world (not modified).
        iterations (int): WOA iterations.
        population (int): WOA population.
        seed: Seed or SeedSequence of the search.
        penalty_weight (float): Weight of the violation magnitudes in the fitness.
        spiral_b (float): Spiral shape constant.

    Returns:
        ExpertSolution: Best-ever fractions per agent, their fitness and slot outcome.
    """
    dim = sum(len(world.beam_slots.get(s, [])) for s in world.sat_ids) * ACTION_FEATURES
    if dim == 0:
        actions = decode_position(world, np.zeros(0))
        outcome = evaluate_allocation(world, actions)
        return ExpertSolution(actions=actions, fitness=expert_fitness(outcome, penalty_weight), outcome=outcome)

    def fitness(position):
        return expert_fitness(evaluate_allocation(world, decode_position(world, position)), penalty_weight)

    result = woa_maximize(fitness, dim, population, iterations, np.random.default_rng(seed), spiral_b)
    actions = decode_position(world, result.position)
    return ExpertSolution(actions=actions, fitness=result.fitness, outcome=evaluate_allocation(world, actions))


@dataclass
class Demonstration:
    """Expert (state, action) pairs with their provenance."""
    states: np.ndarray
    actions: np.ndarray
    agent_ids: np.ndarray
    scenario_hash: bytes
    seed: int
    woa: WoaConfig
    slot_gamma_tot: List[float] = field(default_factory=list)  # not persisted

    def __len__(self) -> int:
        return int(self.states.shape[0])

    @property
    def state_dim(self) -> int:
        return int(self.states.shape[1])

    @property
    def action_dim(self) -> int:
        return int(self.actions.shape[1])


def scenario_hash(scenario: ScenarioConfig) -> bytes:
    """sha256 digest of the scenario's canonical JSON."""
    return hashlib.sha256(scenario.model_dump_json().encode("utf-8")).digest()


def episodes_for(scenario: ScenarioConfig, demonstrations: int) -> int:
    """Episodes needed to record at least `demonstrations` pairs."""
    per_episode = scenario.episode.num_slots * scenario.constellation.num_sats
    return max(1, math.ceil(demonstrations / per_episode))


def generate_demonstrations(scenario: ScenarioConfig, episodes: Optional[int], woa: WoaConfig,
                            seed: int) -> Demonstration:
    """
    Record expert behaviour.

    For every slot of every episode the expert solves the joint allocation, each agent's
    observation and action slice are recorded in schedule order, and the expert actions are
    applied to advance the world.

    Args:
        scenario (ScenarioConfig): Scenario description.
        episodes (int, optional): Episodes to run; None derives it from woa.demonstrations.
        woa (WoaConfig): Expert settings.
        seed (int): Base seed; episode e uses seed + e.

    Returns:
        Demonstration: The recorded pairs.
    """
    episodes = episodes_for(scenario, woa.demonstrations) if episodes is None else episodes
    states, actions, agents, gammas = [], [], [], []
    for ep in range(episodes):
        world = reset(scenario, seed + ep)
        while not world.done:
            solution = woa_solve(world, woa.iterations, woa.population,
                                 np.random.SeedSequence([seed, ep, world.slot]),
                                 woa.penalty_weight, woa.spiral_b)
            step = []
            for agent in decision_schedule(world):
                states.append(observe(world, agent))
                actions.append(solution.actions[agent].ravel())
                agents.append(agent)
                step.append(AgentAction(agent_id=agent, fractions=solution.actions[agent]))
            gammas.append(apply_action_and_step(world, step).gamma_tot)
        logger.info("Expert episode %s/%s done, mean gamma_tot %.4f", ep + 1, episodes,
                    float(np.mean(gammas[-scenario.episode.num_slots:])))
    return Demonstration(
        states=np.array(states, dtype=float).reshape(-1, state_dim(scenario)),
        actions=np.array(actions, dtype=float).reshape(-1, action_dim(scenario)),
        agent_ids=np.array(agents, dtype=np.int32),
        scenario_hash=scenario_hash(scenario),
        seed=seed,
        woa=woa,
        slot_gamma_tot=gammas,
    )


def write_demonstrations(path, demo: Demonstration) -> Path:
    """
    Write a demonstration file.

    Layout (little-endian): magic, version, state dim, action dim, count, seed; the 32-byte
    scenario digest; population, iterations, spiral b, penalty weight; the int32 agent ids;
    then count records of state followed by action as float64.

    Raises:
        FileFormatError: If the file cannot be written.
    """
    path = Path(path)
    count = len(demo)
    body = np.hstack([demo.states, demo.actions]).astype("<f8")
    payload = b"".join([
        _DEMO_HEADER.pack(DEMO_MAGIC, DEMO_VERSION, demo.state_dim, demo.action_dim, count, demo.seed),
        demo.scenario_hash,
        _WOA_BLOCK.pack(demo.woa.population, demo.woa.iterations, demo.woa.spiral_b, demo.woa.penalty_weight),
        np.asarray(demo.agent_ids, dtype="<i4").tobytes(),
        body.tobytes(),
    ])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as e:
        raise FileFormatError(path, f"cannot write demonstrations: {e}") from e
    logger.info("Wrote %s demonstrations to %s", count, path)
    return path


def read_demonstrations(path) -> Demonstration:
    """
    Read a demonstration file written by write_demonstrations.

    Raises:
        FileFormatError: If the file is missing, truncated or malformed.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FileFormatError(path, f"cannot read demonstrations: {e}") from e
    fixed = _DEMO_HEADER.size + 32 + _WOA_BLOCK.size
    if len(data) < fixed:
        raise FileFormatError(path, "truncated header")
    magic, version, s_dim, a_dim, count, seed = _DEMO_HEADER.unpack_from(data)
    if magic != DEMO_MAGIC or version != DEMO_VERSION:
        raise FileFormatError(path, "not a demonstration file")
    offset = _DEMO_HEADER.size
    digest = data[offset:offset + 32]
    offset += 32
    population, iterations, spiral_b, penalty_weight = _WOA_BLOCK.unpack_from(data, offset)
    offset += _WOA_BLOCK.size
    expected = fixed + 4 * count + 8 * count * (s_dim + a_dim)
    if len(data) != expected:
        raise FileFormatError(path, f"expected {expected} bytes, found {len(data)}")
    agents = np.frombuffer(data, dtype="<i4", count=count, offset=offset).astype(np.int32)
    offset += 4 * count
    body = np.frombuffer(data, dtype="<f8", offset=offset).astype(float).reshape(count, s_dim + a_dim)
    try:
        woa = WoaConfig(population=population, iterations=iterations, spiral_b=spiral_b,
                        penalty_weight=penalty_weight)
    except ValueError as e:
        raise FileFormatError(path, f"invalid expert settings: {e}") from e
    return Demonstration(states=body[:, :s_dim].copy(), actions=body[:, s_dim:].copy(), agent_ids=agents,
                         scenario_hash=bytes(digest), seed=seed, woa=woa)
