"""
Module: env.py
Description: This module implements the allocation environment. It builds the world at the start
of an episode (geometry, fading, clustering and matching), produces per-agent local observations,
applies the power/spectrum fractions chosen by the satellites in their round-robin decision
sub-slots, evaluates rates and constraint violations, and advances remaining data, residual
latency and the channel between slots.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.engine.channel import (
    LinkChannel,
    build_link,
    link_rate,
    noise_power,
    sinr_matrix,
    spectrum_efficiency_matrix,
    steering_correlation,
)
from app.engine.geometry import RueState, SatelliteState, compute_visibility, propagate, sample_rues
from app.engine.matching import AssociationVector, Cluster, Matching, associate, cluster_rues
from app.exceptions import ConfigurationError, InfeasibleScenarioError, NumericalError
from app.schemas import FadingUpdate, PenaltyWeights, ScenarioConfig

logger = logging.getLogger(__name__)

STATE_FEATURES = 7  # snr, interference, chi, demand, latency, prev power, prev spectrum
ACTION_FEATURES = 2  # power fraction, spectrum fraction
SUM_TOL = 1e-9
SNR_SCALE_DB = 50.0
DEMAND_SCALE_BITS = 1e7


def state_dim(scenario: ScenarioConfig) -> int:
    return scenario.radio.n_beam * STATE_FEATURES


def action_dim(scenario: ScenarioConfig) -> int:
    return scenario.radio.n_beam * ACTION_FEATURES


@dataclass
class AgentAction:
    """
    Fractions chosen by one satellite for its beam slots.

    Attributes:
        agent_id (int): Acting satellite.
        fractions (np.ndarray): (n_beam, 2) array; column 0 is the power fraction, column 1 the
            spectrum fraction. Padded slots are zero.
    """
    agent_id: int
    fractions: np.ndarray

    @property
    def power(self) -> np.ndarray:
        return self.fractions[:, 0]

    @property
    def spectrum(self) -> np.ndarray:
        return self.fractions[:, 1]

    def as_vector(self) -> np.ndarray:
        return self.fractions.ravel().copy()

    @classmethod
    def from_vector(cls, agent_id: int, vector, n_beam: int) -> "AgentAction":
        return cls(agent_id=agent_id, fractions=np.asarray(vector, dtype=float).reshape(n_beam, ACTION_FEATURES))


@dataclass
class SlotOutcome:
    """
    Rates and constraint checks of one slot.

    Violation magnitudes are zero when a constraint holds: C1 as the relative shortfall of the
    rate below D/tau, C2 as 1 - gamma/gamma_min, C8 as the relative excess over the backhaul rate.
    """
    sinr: np.ndarray            # (S, U)
    rate: np.ndarray            # (S, U) bit/s
    se_per_sat: np.ndarray      # (S,)
    gamma_tot: float
    checked: np.ndarray         # (U,) RUEs with a serving link
    c1_magnitude: np.ndarray    # (U,)
    c2_magnitude: np.ndarray    # (U,)
    c8_magnitude: np.ndarray    # (S,)

    @property
    def c1_violated(self) -> np.ndarray:
        return self.c1_magnitude > 0

    @property
    def c2_violated(self) -> np.ndarray:
        return self.c2_magnitude > 0

    @property
    def c8_violated(self) -> np.ndarray:
        return self.c8_magnitude > 0

    def violation_totals(self) -> Tuple[float, float, float]:
        return float(self.c1_magnitude.sum()), float(self.c2_magnitude.sum()), float(self.c8_magnitude.sum())

    def penalty(self, weights: PenaltyWeights) -> float:
        c1, c2, c8 = self.violation_totals()
        return weights.c1 * c1 + weights.c2 * c2 + weights.c8 * c8

    def violation_counts(self) -> Dict[str, int]:
        return {
            "c1": int(self.c1_violated.sum()),
            "c2": int(self.c2_violated.sum()),
            "c8": int(self.c8_violated.sum()),
        }


@dataclass
class World:
    """Mutable state of one episode; owned by the stepping loop."""
    scenario: ScenarioConfig
    rng: np.random.Generator
    rues0: List[RueState]
    sat_ids: List[int]
    rue_ids: List[int]
    noise: float
    slot: int = 0
    t: float = 0.0
    sats: List[SatelliteState] = field(default_factory=list)
    rues: List[RueState] = field(default_factory=list)
    links: Dict[Tuple[int, int], LinkChannel] = field(default_factory=dict)
    sf_db: Optional[np.ndarray] = None
    gains: Optional[np.ndarray] = None
    correlation: Optional[np.ndarray] = None
    clusters: List[Cluster] = field(default_factory=list)
    matching: Optional[Matching] = None
    association: AssociationVector = field(default_factory=AssociationVector)
    beam_slots: Dict[int, List[int]] = field(default_factory=dict)
    demand: Optional[np.ndarray] = None
    tau: Optional[np.ndarray] = None
    actions: Optional[np.ndarray] = None  # (S, n_beam, 2) held fractions
    trace: List[dict] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.slot >= self.scenario.episode.num_slots

    @property
    def n_beam(self) -> int:
        return self.scenario.radio.n_beam

    def sat_index(self, sat_id: int) -> int:
        return self.sat_ids.index(sat_id)

    def active_mask(self, agent_id: int) -> np.ndarray:
        mask = np.zeros(self.n_beam, dtype=bool)
        mask[:len(self.beam_slots.get(agent_id, []))] = True
        return mask


def _sample_fading(world: World) -> None:
    sigma = world.scenario.radio.sf_sigma_db
    world.sf_db = world.rng.normal(0.0, sigma, size=(len(world.sat_ids), len(world.rue_ids)))


def _refresh_channels(world: World) -> None:
    """Propagate to world.t and rebuild every visible link from the current fading draw."""
    scenario = world.scenario
    world.sats, world.rues = propagate(scenario.constellation, world.rues0, world.t, scenario.area_side_km)
    visibility = compute_visibility(world.sats, world.rues, scenario.min_elevation_rad)
    n_ant = scenario.radio.n_antennas
    s_index = {s: i for i, s in enumerate(world.sat_ids)}
    u_index = {u: i for i, u in enumerate(world.rue_ids)}
    gains = np.zeros((len(world.sat_ids), len(world.rue_ids)))
    steering = np.zeros((len(world.sat_ids), len(world.rue_ids), n_ant), dtype=complex)
    links = {}
    for rue_id, visible in visibility.items():
        for v in visible:
            i, j = s_index[v.sat_id], u_index[rue_id]
            link = build_link(v, scenario.radio, float(world.sf_db[i, j]), scenario.constellation.sat_speed_kms)
            links[(v.sat_id, rue_id)] = link
            gains[i, j] = link.gain_g
            steering[i, j] = link.steering
    world.links = links
    world.gains = gains
    world.correlation = steering_correlation(steering)


def _reassociate(world: World) -> None:
    scenario = world.scenario
    num_clusters = min(scenario.num_clusters, len(world.rues))
    world.clusters = cluster_rues(world.rues, num_clusters, seed=scenario.seed)
    world.matching, world.association = associate(
        world.clusters, world.links, world.sat_ids, world.rue_ids, scenario.radio, world.noise,
        scenario.capacity, scenario.swap_iteration_cap,
    )
    previous = dict(world.beam_slots)
    world.beam_slots = {s: world.association.beams(s) for s in world.sat_ids}
    if world.actions is not None:
        for s in world.sat_ids:
            if previous.get(s) != world.beam_slots[s]:
                world.actions[world.sat_index(s)] = 0.0


def reset(scenario: ScenarioConfig, seed: int) -> World:
    """
    Start an episode.

    Positions are propagated to t=0, shadow fading is drawn, RUEs are clustered and matched to
    satellites, and every RUE starts with its initial demand and tau = tau_max.

    Args:
        scenario (ScenarioConfig): Scenario description.
        seed (int): Episode seed.

    Returns:
        World: The initial world.

    Raises:
        InfeasibleScenarioError: If there are no RUEs or no RUE sees any satellite.
    """
    if scenario.rue_count == 0:
        raise InfeasibleScenarioError("the scenario has no RUEs")
    rng = np.random.default_rng(seed)
    episode = scenario.episode
    rues0 = sample_rues(
        scenario.rue_count, scenario.area_side_km, scenario.rue_speed_kmh,
        (episode.demand_min_mbit * 1e6, episode.demand_max_mbit * 1e6), rng,
    )
    sat_ids = list(range(scenario.constellation.num_sats))
    world = World(
        scenario=scenario, rng=rng, rues0=rues0, sat_ids=sat_ids,
        rue_ids=[r.rue_id for r in rues0], noise=noise_power(scenario.radio),
    )
    _sample_fading(world)
    _refresh_channels(world)
    if not world.links:
        raise InfeasibleScenarioError("no RUE sees any satellite above the minimum elevation")
    _reassociate(world)
    world.demand = np.array([r.demand_bits for r in rues0], dtype=float)
    world.tau = np.full(len(rues0), scenario.radio.tau_max)
    world.actions = np.zeros((len(sat_ids), world.n_beam, ACTION_FEATURES))
    logger.debug("Episode reset with seed %s: %s links, %s associated", seed, len(world.links),
                 len(world.association.pairs))
    return world


def advance_to(world: World, t: float) -> World:
    """Move the world to time t with fresh fading, channels, clusters and association."""
    world.t = t
    _sample_fading(world)
    _refresh_channels(world)
    _reassociate(world)
    return world


def decision_schedule(world: World) -> List[int]:
    """Agents in the order they act within a slot (round-robin by sat_id)."""
    return sorted(world.sat_ids)


def observe(world: World, agent_id: int) -> np.ndarray:
    """
    Local observation of one satellite.

    Per beam slot (RUEs served by the agent, sorted by id, padded to n_beam): own-link SNR at
    full power, aggregate interference from other satellites' served beams at an equal power
    split, chi, remaining data, residual latency and the agent's previous fractions. Padded
    slots are zero.
    """
    if agent_id not in world.sat_ids:
        raise ConfigurationError(f"unknown agent {agent_id}")
    radio = world.scenario.radio
    s = world.sat_index(agent_id)
    out = np.zeros((world.n_beam, STATE_FEATURES))
    served = world.association.matrix(world.sat_ids, world.rue_ids)
    nominal = np.where(served, radio.p_max / np.maximum(served.sum(axis=1, keepdims=True), 1), 0.0)
    for slot, rue_id in enumerate(world.beam_slots.get(agent_id, [])):
        u = world.rue_ids.index(rue_id)
        snr = world.gains[s, u] ** 2 * radio.p_max / world.noise
        interference = 0.0
        for s2 in range(len(world.sat_ids)):
            if s2 == s:
                continue
            interference += float(world.gains[s2, u] ** 2 * (world.correlation[s2, u] * nominal[s2]).sum())
        out[slot] = (
            10.0 * math.log10(max(snr, 1e-30)) / SNR_SCALE_DB,
            10.0 * math.log10(1.0 + interference / world.noise) / SNR_SCALE_DB,
            1.0,
            world.demand[u] / DEMAND_SCALE_BITS,
            world.tau[u] / radio.tau_max,
            world.actions[s, slot, 0],
            world.actions[s, slot, 1],
        )
    return out.ravel()


def squash_action(raw, active_mask) -> np.ndarray:
    """
    Map unbounded policy outputs to feasible fractions.

    A sigmoid bounds each entry, padded slots are zeroed and each column is divided by
    max(1, column sum), so power and spectrum fractions never exceed the budget.
    """
    mask = np.asarray(active_mask, dtype=bool)
    z = np.asarray(raw, dtype=float).reshape(mask.size, ACTION_FEATURES)
    fractions = 1.0 / (1.0 + np.exp(-np.clip(z, -30.0, 30.0)))
    fractions[~mask] = 0.0
    return fractions / np.maximum(1.0, fractions.sum(axis=0, keepdims=True))


def _sanitize(world: World, action: AgentAction) -> np.ndarray:
    fractions = np.asarray(action.fractions, dtype=float)
    if fractions.shape != (world.n_beam, ACTION_FEATURES):
        raise ConfigurationError(f"action of agent {action.agent_id} has shape {fractions.shape}")
    if not np.all(np.isfinite(fractions)):
        raise NumericalError(f"action of agent {action.agent_id} holds non-finite entries")
    if np.any(fractions < 0.0) or np.any(fractions > 1.0):
        logger.warning("Clipping out-of-range fractions of agent %s", action.agent_id)
        fractions = np.clip(fractions, 0.0, 1.0)
    fractions = np.where(world.active_mask(action.agent_id)[:, None], fractions, 0.0)
    sums = fractions.sum(axis=0)
    if np.any(sums > 1.0 + SUM_TOL):
        logger.warning("Normalizing fractions of agent %s with sums %s", action.agent_id, sums)
        fractions = fractions / np.maximum(1.0, sums)
    return fractions


def check_constraints(sinr: np.ndarray, rate: np.ndarray, associated: np.ndarray, demand: np.ndarray,
                      tau: np.ndarray, gamma_min: float, r_back: float) -> Tuple[np.ndarray, ...]:
    """
    Violation magnitudes of the delay-rate, SINR and backhaul constraints.

    Args:
        sinr (np.ndarray): (S, U) linear SINR.
        rate (np.ndarray): (S, U) rates in bit/s.
        associated (np.ndarray): (S, U) association.
        demand (np.ndarray): (U,) remaining data in bits.
        tau (np.ndarray): (U,) residual latency in seconds.
        gamma_min (float): Linear SINR threshold.
        r_back (float): Backhaul rate in bit/s.

    Returns:
        tuple: (checked, c1, c2, c8) where checked marks RUEs with a serving link.
    """
    checked = associated.any(axis=0)
    served_rate = (rate * associated).sum(axis=0)
    served_sinr = (sinr * associated).sum(axis=0)

    c1 = np.zeros(demand.shape)
    needs = checked & (demand > 0)
    expired = needs & (tau <= 0)
    live = needs & (tau > 0)
    required = np.divide(demand, tau, out=np.zeros_like(demand), where=live)
    c1[live] = np.maximum(0.0, required[live] - served_rate[live]) / required[live]
    c1[expired] = 1.0

    c2 = np.where(checked, np.maximum(0.0, 1.0 - served_sinr / gamma_min), 0.0)
    c8 = np.maximum(0.0, (rate * associated).sum(axis=1) / r_back - 1.0)
    return checked, c1, c2, c8


def _held_matrices(world: World, held: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    radio = world.scenario.radio
    shape = (len(world.sat_ids), len(world.rue_ids))
    power, band, associated = np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=bool)
    u_index = {u: j for j, u in enumerate(world.rue_ids)}
    for i, s in enumerate(world.sat_ids):
        for slot, rue_id in enumerate(world.beam_slots.get(s, [])):
            j = u_index[rue_id]
            associated[i, j] = True
            power[i, j] = held[i, slot, 0] * radio.p_max
            band[i, j] = held[i, slot, 1] * radio.b_tot
    return power, band, associated


def evaluate_allocation(world: World, actions: Optional[Mapping[int, np.ndarray]] = None) -> SlotOutcome:
    """
    Evaluate fractions against the current world without changing it.

    Args:
        world (World): Current world.
        actions (Mapping, optional): sat_id -> (n_beam, 2) fractions; agents left out keep their
            held fractions.

    Returns:
        SlotOutcome: Rates, spectrum efficiency and constraint checks.
    """
    held = world.actions.copy()
    for sat_id, fractions in (actions or {}).items():
        held[world.sat_index(sat_id)] = fractions
    radio = world.scenario.radio
    power, band, associated = _held_matrices(world, held)
    gamma = sinr_matrix(world.gains, world.correlation, power, associated, world.noise)
    rate = np.where(band > 0, link_rate(gamma, band), 0.0)
    se = spectrum_efficiency_matrix(rate, band)
    checked, c1, c2, c8 = check_constraints(gamma, rate, associated, world.demand, world.tau,
                                            radio.gamma_min, radio.r_back)
    return SlotOutcome(sinr=gamma, rate=rate, se_per_sat=se, gamma_tot=float(se.sum()), checked=checked,
                       c1_magnitude=c1, c2_magnitude=c2, c8_magnitude=c8)


def apply_action_and_step(world: World, actions: Sequence[AgentAction]) -> SlotOutcome:
    """
    Run one slot.

    Agents act in their decision sub-slots in schedule order; agents without an action hold
    their previous fractions. Observations carry only the observing agent's own fractions
    and interference at a nominal equal split, so an agent acting later in the slot sees the
    same state whatever its predecessors chose; the sub-slots therefore collapse into a single
    evaluation once every acting agent has written its fractions. The slot is evaluated with the pre-update D and tau, then
    D <- max(0, D - R*dt), tau <- tau - dt, and geometry, fading and (on the configured period)
    the association are refreshed.

    Raises:
        ConfigurationError: If the episode is over or actions break the schedule order.
        NumericalError: If an action holds non-finite entries.
    """
    if world.done:
        raise ConfigurationError("the episode is over; call reset")
    order = decision_schedule(world)
    positions = [order.index(a.agent_id) if a.agent_id in order else -1 for a in actions]
    if -1 in positions or positions != sorted(set(positions)):
        raise ConfigurationError(f"actions must follow the decision schedule {order}")

    for action in actions:
        world.actions[world.sat_index(action.agent_id)] = _sanitize(world, action)

    outcome = evaluate_allocation(world)
    dt = world.scenario.episode.slot_s
    served_rate = outcome.rate.sum(axis=0)
    world.demand = np.maximum(0.0, world.demand - served_rate * dt)
    world.tau = world.tau - dt

    counts = outcome.violation_counts()
    for action in actions:
        world.trace.append({
            "slot": world.slot,
            "agent": action.agent_id,
            "action": " ".join(f"{v:.6f}" for v in world.actions[world.sat_index(action.agent_id)].ravel()),
            "gamma_tot": outcome.gamma_tot,
            "c1": counts["c1"],
            "c2": counts["c2"],
            "c8": counts["c8"],
        })

    world.slot += 1
    world.t = world.slot * dt
    if not world.done:
        episode = world.scenario.episode
        if FadingUpdate(episode.fading_update) is FadingUpdate.slot:
            _sample_fading(world)
        _refresh_channels(world)
        if episode.association_period and world.slot % episode.association_period == 0:
            _reassociate(world)
    logger.debug("Slot %s: gamma_tot=%.4f violations=%s", world.slot, outcome.gamma_tot, counts)
    return outcome


def handcrafted_reward(outcome: SlotOutcome, penalty_weights: PenaltyWeights) -> float:
    """Total spectrum efficiency minus weighted violation magnitudes."""
    return outcome.gamma_tot - outcome.penalty(penalty_weights)


def trace_frame(world: World) -> pd.DataFrame:
    """Episode trace, one row per acting agent per slot."""
    return pd.DataFrame(world.trace, columns=["slot", "agent", "action", "gamma_tot", "c1", "c2", "c8"])


def write_trace(world: World, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trace_frame(world).to_csv(path, index=False, float_format="%.10g")
    return path
