"""
Module: harness.py
Description: This module runs experiments end to end: training and evaluating each allocation
method, bandwidth/power/altitude sweeps with metrics and plot-data export, paired convergence
runs, association snapshots, allocation traces, and persistence of finished runs.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import spearmanr
from sqlalchemy.orm import Session

from app import models
from app.engine.baselines import PpoTrainer, equal_split
from app.engine.env import (
    AgentAction,
    World,
    advance_to,
    apply_action_and_step,
    decision_schedule,
    evaluate_allocation,
    handcrafted_reward,
    observe,
    reset,
)
from app.engine.expert import generate_demonstrations, woa_solve
from app.engine.federated import FederationRoundLog, mean_curves, run_federation
from app.engine.gail import GailTrainer
from app.engine.learner import EpisodeStats, curves_frame, mean_action
from app.engine.nn import Mlp
from app.exceptions import ConfigurationError, LeoFedError
from app.schemas import (
    AssociationSnapshot,
    ClusterRecord,
    EdgeRecord,
    ExperimentConfig,
    SPEED_OF_LIGHT,
    Method,
    PenaltyWeights,
    SatelliteRecord,
    ScenarioConfig,
    SweepAxis,
    WoaConfig,
)

logger = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 100_000
FLOAT_FORMAT = "%.10g"
METRIC_COLUMNS = ["method", "sweep_value", "seed", "mean_se", "mean_reward", "c1_violation_rate",
                  "c2_violation_rate", "c8_violation_rate", "episodes_to_convergence"]
LEARNED = (Method.gail, Method.ppo)


@dataclass
class TrainedMethod:
    method: Method
    policy: Optional[Mlp] = None
    curves: List[EpisodeStats] = field(default_factory=list)
    logs: List[FederationRoundLog] = field(default_factory=list)


@dataclass
class EvaluationSummary:
    """Averages over every evaluated slot."""
    method: Method
    mean_se: float
    mean_reward: float
    c1_violation_rate: float
    c2_violation_rate: float
    c8_violation_rate: float
    slots: int


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(config.model_dump_json().encode("utf-8")).hexdigest()


def apply_sweep_value(scenario: ScenarioConfig, axis: SweepAxis, value: float) -> ScenarioConfig:
    """Copy of the scenario with the swept parameter set (MHz, W or km)."""
    axis = SweepAxis(axis)
    if axis is SweepAxis.bandwidth:
        radio = scenario.radio.model_copy(update={"b_tot_mhz": value})
        return scenario.model_copy(update={"radio": radio})
    if axis is SweepAxis.power:
        radio = scenario.radio.model_copy(update={"p_max_w": value})
        return scenario.model_copy(update={"radio": radio})
    if axis is SweepAxis.altitude:
        constellation = scenario.constellation.model_copy(update={"altitude_km": value})
        return scenario.model_copy(update={"constellation": constellation})
    return scenario


def train_method(config: ExperimentConfig, scenario: ScenarioConfig, method: Method, seed: int) -> TrainedMethod:
    """
    Train a method with the federated wrapper; expert and fairness need no training.
    """
    method = Method(method)
    if method not in LEARNED:
        return TrainedMethod(method=method)
    if method is Method.gail:
        demo = generate_demonstrations(scenario, None, config.woa, seed)
        trainer = GailTrainer(scenario, demo, config.gail, seed)
        episodes = config.gail.episodes
    else:
        trainer = PpoTrainer(scenario, config.ppo, seed)
        episodes = config.ppo.episodes
    rounds = math.ceil(episodes / config.federation.aggregation_interval)
    result = run_federation(trainer, scenario.constellation.num_sats, config.federation, rounds)
    return TrainedMethod(method=method, policy=result.global_policy, curves=mean_curves(result.curves),
                         logs=result.logs)


def select_actions(world: World, method: Method, policy: Optional[Mlp] = None,
                   woa: Optional[WoaConfig] = None, seed=0) -> Dict[int, np.ndarray]:
    """Fractions of every agent for the current slot under a method."""
    method = Method(method)
    if method is Method.fairness:
        return {a: equal_split(world.active_mask(a)) for a in decision_schedule(world)}
    if method is Method.expert:
        woa = woa or WoaConfig()
        return woa_solve(world, woa.iterations, woa.population, seed, woa.penalty_weight, woa.spiral_b).actions
    if policy is None:
        raise ConfigurationError(f"method {method.value} needs a trained policy")
    return {a: mean_action(policy, observe(world, a), world.active_mask(a)) for a in decision_schedule(world)}


def evaluate_method(scenario: ScenarioConfig, method: Method, policy: Optional[Mlp], episodes: int, seed: int,
                    woa: Optional[WoaConfig] = None, penalty: Optional[PenaltyWeights] = None) -> EvaluationSummary:
    """
    Execute a method deterministically on fresh episodes.

    Satellites act in their decision sub-slots with mean actions of the policy; fading is
    updated every slot.
    """
    penalty = penalty or PenaltyWeights()
    gammas, rewards = [], []
    violated = np.zeros(3)
    checked = np.zeros(3)
    for e in range(episodes):
        ep_seed = seed + EVAL_SEED_OFFSET + e
        world = reset(scenario, ep_seed)
        while not world.done:
            fractions = select_actions(world, method, policy, woa, np.random.SeedSequence([ep_seed, world.slot]))
            actions = [AgentAction(agent_id=a, fractions=fractions[a]) for a in decision_schedule(world)]
            outcome = apply_action_and_step(world, actions)
            gammas.append(outcome.gamma_tot)
            rewards.append(handcrafted_reward(outcome, penalty))
            counts = outcome.violation_counts()
            violated += (counts["c1"], counts["c2"], counts["c8"])
            n_links = int(outcome.checked.sum())
            checked += (n_links, n_links, outcome.c8_magnitude.size)
    rates = np.divide(violated, checked, out=np.zeros(3), where=checked > 0)
    return EvaluationSummary(method=Method(method), mean_se=float(np.mean(gammas)), mean_reward=float(np.mean(rewards)),
                             c1_violation_rate=float(rates[0]), c2_violation_rate=float(rates[1]),
                             c8_violation_rate=float(rates[2]), slots=len(gammas))


def episodes_to_fraction(se_curve: Sequence[float], fraction: float = 0.9) -> Optional[int]:
    """
    Episodes until the curve first reaches `fraction` of its terminal level, where the
    terminal level is the mean of the last tenth of the curve.
    """
    if not len(se_curve):
        return None
    curve = np.asarray(se_curve, dtype=float)
    tail = max(1, curve.size // 10)
    target = fraction * curve[-tail:].mean()
    hits = np.flatnonzero(curve >= target)
    return int(hits[0]) + 1 if hits.size else curve.size


def terminal_gap(terminal_a: Sequence[float], terminal_b: Sequence[float]) -> float:
    """Difference of median terminal spectrum efficiency."""
    return float(np.median(terminal_a) - np.median(terminal_b))


def write_frame(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def plot_data(metrics: pd.DataFrame) -> pd.DataFrame:
    """(x, method, mean, std) of mean_se per grid value and method."""
    if metrics.empty:
        return pd.DataFrame(columns=["x", "method", "mean", "std"])
    grouped = metrics.groupby(["sweep_value", "method"], sort=True)["mean_se"]
    out = grouped.agg(mean="mean", std=lambda s: float(np.std(s.to_numpy()))).reset_index()
    return out.rename(columns={"sweep_value": "x"})[["x", "method", "mean", "std"]]


@dataclass
class SweepResult:
    metrics: pd.DataFrame
    plot: pd.DataFrame
    failures: pd.DataFrame
    logs: Dict[str, List[FederationRoundLog]] = field(default_factory=dict)


def run_sweep(config: ExperimentConfig, out_dir=None) -> SweepResult:
    """
    Train and evaluate every method on every (grid value, seed) cell.

    Failed cells are logged and listed in failures; the sweep continues.
    """
    rows, failures, logs = [], [], {}
    axis = config.sweep.axis
    for value in config.sweep.grid:
        scenario = apply_sweep_value(config.scenario, axis, value)
        for seed in config.seeds:
            for method in config.methods:
                try:
                    trained = train_method(config, scenario, method, seed)
                    summary = evaluate_method(scenario, method, trained.policy, config.eval_episodes, seed,
                                              config.woa, config.ppo.penalty)
                except LeoFedError as e:
                    logger.error("Sweep cell (%s, %s, %s) failed: %s", Method(method).value, value, seed, e)
                    failures.append({"method": Method(method).value, "sweep_value": value, "seed": seed,
                                     "error": str(e)})
                    continue
                if trained.logs:
                    logs[f"{Method(method).value}/{value}/{seed}"] = trained.logs
                rows.append({
                    "method": Method(method).value,
                    "sweep_value": value,
                    "seed": seed,
                    "mean_se": summary.mean_se,
                    "mean_reward": summary.mean_reward,
                    "c1_violation_rate": summary.c1_violation_rate,
                    "c2_violation_rate": summary.c2_violation_rate,
                    "c8_violation_rate": summary.c8_violation_rate,
                    "episodes_to_convergence": episodes_to_fraction([c.mean_se for c in trained.curves]),
                })
                logger.info("Sweep cell (%s, %s, %s): mean_se=%.4f", Method(method).value, value, seed,
                            summary.mean_se)
    metrics = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    metrics["episodes_to_convergence"] = metrics["episodes_to_convergence"].astype("Int64")
    result = SweepResult(metrics=metrics, plot=plot_data(metrics),
                         failures=pd.DataFrame(failures, columns=["method", "sweep_value", "seed", "error"]),
                         logs=logs)
    if out_dir is not None:
        out = Path(out_dir)
        write_frame(result.metrics, out / "metrics.csv")
        write_frame(result.plot, out / f"plot_{SweepAxis(axis).value}.csv")
        if failures:
            write_frame(result.failures, out / "failures.csv")
    return result


@dataclass
class ConvergenceResult:
    curves: pd.DataFrame
    summary: pd.DataFrame
    gap: float


def run_convergence(config: ExperimentConfig, out_dir=None) -> ConvergenceResult:
    """
    Train the learned methods on the same seeds and compare their curves.

    The gap is the median terminal evaluation SE of the first learned method minus that of
    the second (zero when only one is configured).

    Raises:
        ConfigurationError: If no learned method is configured.
    """
    methods = [Method(m) for m in config.methods if Method(m) in LEARNED]
    if not methods:
        raise ConfigurationError("convergence runs need gail or ppo among the methods")
    curve_frames, summary_rows = [], []
    terminal: Dict[Method, List[float]] = {m: [] for m in methods}
    for seed in config.seeds:
        for method in methods:
            trained = train_method(config, config.scenario, method, seed)
            frame = curves_frame(trained.curves)
            frame.insert(0, "seed", seed)
            frame.insert(0, "method", method.value)
            curve_frames.append(frame)
            summary = evaluate_method(config.scenario, method, trained.policy, config.eval_episodes, seed,
                                      config.woa, config.ppo.penalty)
            terminal[method].append(summary.mean_se)
            summary_rows.append({
                "method": method.value,
                "seed": seed,
                "terminal_se": summary.mean_se,
                "episodes_to_90": episodes_to_fraction([c.mean_se for c in trained.curves]),
            })
    gap = terminal_gap(terminal[methods[0]], terminal[methods[1]]) if len(methods) > 1 else 0.0
    curves = pd.concat(curve_frames, ignore_index=True)
    summary = pd.DataFrame(summary_rows, columns=["method", "seed", "terminal_se", "episodes_to_90"])
    logger.info("Convergence gap %s - %s: %.4f", methods[0].value, methods[-1].value, gap)
    if out_dir is not None:
        write_frame(curves, Path(out_dir) / "curves.csv")
        write_frame(summary, Path(out_dir) / "convergence.csv")
    return ConvergenceResult(curves=curves, summary=summary, gap=gap)


def snapshot_association(scenario: ScenarioConfig, slots: Sequence[int], seed: int, out_dir=None,
                         interval_s: Optional[float] = None) -> List[AssociationSnapshot]:
    """
    Association state at each requested slot.

    Slot k is taken at t = k * interval_s (the episode slot length by default) with fresh
    clustering and matching; per-satellite SE uses the equal split.
    """
    interval = scenario.episode.slot_s if interval_s is None else interval_s
    world = reset(scenario, seed)
    snapshots = []
    for k in slots:
        advance_to(world, k * interval)
        outcome = evaluate_allocation(world, {a: equal_split(world.active_mask(a)) for a in world.sat_ids})
        snapshot = AssociationSnapshot(
            slot=k,
            time_s=world.t,
            satellites=[SatelliteRecord(sat_id=s.sat_id, plane_index=s.plane_index, x_km=s.x_km, y_km=s.y_km,
                                        se=float(outcome.se_per_sat[i])) for i, s in enumerate(world.sats)],
            clusters=[ClusterRecord(cluster_id=c.cluster_id, members=list(c.member_rues), centroid=list(c.centroid),
                                    sat_id=world.matching.mu_cluster.get(c.cluster_id)) for c in world.clusters],
            edges=[EdgeRecord(sat_id=s, rue_id=u) for s, u in sorted(world.association.pairs)],
        )
        snapshots.append(snapshot)
        if out_dir is not None:
            path = Path(out_dir) / f"snapshot_{k:05d}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(snapshot.model_dump_json(indent=2))
    return snapshots


def trace_allocations(scenario: ScenarioConfig, method: Method, policy: Optional[Mlp], slots: int, seed: int,
                      woa: Optional[WoaConfig] = None, out_dir=None) -> pd.DataFrame:
    """Per slot and served RUE: power fraction, spectrum fraction and slant range to the server."""
    world = reset(scenario, seed)
    rows = []
    while not world.done and world.slot < slots:
        fractions = select_actions(world, method, policy, woa, np.random.SeedSequence([seed, world.slot]))
        for a in decision_schedule(world):
            for i, rue_id in enumerate(world.beam_slots.get(a, [])):
                link = world.links[(a, rue_id)]
                rows.append({
                    "slot": world.slot,
                    "sat_id": a,
                    "rue_id": rue_id,
                    "power_fraction": float(fractions[a][i, 0]),
                    "spectrum_fraction": float(fractions[a][i, 1]),
                    "distance_km": link.delay_s * SPEED_OF_LIGHT / 1e3,
                })
        apply_action_and_step(world, [AgentAction(agent_id=a, fractions=fractions[a]) for a in decision_schedule(world)])
    trace = pd.DataFrame(rows, columns=["slot", "sat_id", "rue_id", "power_fraction", "spectrum_fraction",
                                        "distance_km"])
    if out_dir is not None:
        write_frame(trace, Path(out_dir) / f"trace_{Method(method).value}.csv")
    return trace


def allocation_rank_correlation(trace: pd.DataFrame) -> float:
    """Spearman correlation between slant range and power fraction."""
    if len(trace) < 2:
        return 0.0
    rho, _ = spearmanr(trace["distance_km"], trace["power_fraction"])
    return 0.0 if np.isnan(rho) else float(rho)


def record_run(session: Session, command: str, config: ExperimentConfig, seed: int,
               method: Optional[Method] = None, metrics: Optional[pd.DataFrame] = None,
               logs: Sequence[FederationRoundLog] = (), status: str = "completed") -> models.ExperimentRun:
    """Persist a finished run with its metric rows and round logs."""
    run = models.ExperimentRun(
        command=command,
        method=Method(method).value if method is not None else None,
        config_hash=config_hash(config),
        seed=seed,
        status=status,
    )
    session.add(run)
    session.flush()
    if metrics is not None:
        for row in metrics.to_dict(orient="records"):
            episodes = row.get("episodes_to_convergence")
            session.add(models.MetricRow(
                run_id=run.id,
                method=row["method"],
                sweep_value=float(row["sweep_value"]),
                seed=int(row["seed"]),
                mean_se=float(row["mean_se"]),
                mean_reward=float(row["mean_reward"]),
                c1_violation_rate=float(row["c1_violation_rate"]),
                c2_violation_rate=float(row["c2_violation_rate"]),
                c8_violation_rate=float(row["c8_violation_rate"]),
                episodes_to_convergence=None if pd.isna(episodes) else int(episodes),
            ))
    for log in logs:
        session.add(models.FederationRound(
            run_id=run.id,
            round_index=log.round_index,
            weights=[log.weights[a] for a in sorted(log.weights)],
            pre_hashes={str(a): h for a, h in sorted(log.pre_hashes.items())},
            post_hash=log.post_hash,
            distance=log.distance,
            duration_s=log.duration_s,
        ))
    session.commit()
    session.refresh(run)
    logger.info("Recorded run %s (%s)", run.id, command)
    return run
