"""
Module: cli.py
Description: This module is the command-line front end of the laboratory. Each subcommand loads
the experiment configuration, applies command-line overrides, runs one engine entry point,
writes its outputs under the output directory and optionally records the run in the database.

Usage:
    python -m app.cli [--config FILE] [--seed N] [--out DIR] [--db [URL]] <command> [options]
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd
from pydantic import ValidationError
from sqlalchemy.orm import sessionmaker

from app.config import DATABASE_URL, DEFAULT_SEED, OUTPUT_DIR, configure_logging, load_experiment_config
from app.database import Base, make_engine
from app.engine import expert, harness, matching, nn
from app.engine.federated import FederationRoundLog
from app.engine.learner import curves_frame
from app.exceptions import ConfigurationError, LeoFedError
from app.schemas import ExperimentConfig, MatchInstance, Method, WeightsMode

logger = logging.getLogger(__name__)


def rounds_frame(logs: List[FederationRoundLog]) -> pd.DataFrame:
    return pd.DataFrame([{
        "round_index": log.round_index,
        "weights": " ".join(f"{log.weights[a]:.10g}" for a in sorted(log.weights)),
        "samples": " ".join(str(log.samples[a]) for a in sorted(log.samples)),
        "post_hash": log.post_hash,
        "distance": log.distance,
        "duration_s": log.duration_s,
    } for log in logs], columns=["round_index", "weights", "samples", "post_hash", "distance", "duration_s"])


def _config(args) -> ExperimentConfig:
    config = load_experiment_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seeds"] = [args.seed]
    if args.out is not None:
        updates["output_dir"] = args.out
    elif args.config is None:
        updates["output_dir"] = OUTPUT_DIR
    return config.model_copy(update=updates)


def _seed(config: ExperimentConfig) -> int:
    return config.seeds[0] if config.seeds else DEFAULT_SEED


def _record(args, config: ExperimentConfig, method=None, metrics=None, logs=()) -> None:
    if args.db is None:
        return
    engine = make_engine(args.db)
    Base.metadata.create_all(engine)
    session = sessionmaker(bind=engine)()
    try:
        run = harness.record_run(session, args.command, config, _seed(config), method, metrics, logs)
        print(f"Recorded run {run.id}")
    finally:
        session.close()


def _load_policy(path: Optional[str], method: Method):
    if Method(method) in harness.LEARNED:
        if not path:
            raise ConfigurationError(f"--policy is required for method {Method(method).value}")
        return nn.load_params(path)
    return None


def cmd_train(args, config: ExperimentConfig) -> None:
    federation = config.federation
    if args.agg_interval is not None:
        federation = federation.model_copy(update={"aggregation_interval": args.agg_interval})
    if args.weights is not None:
        federation = federation.model_copy(update={"weights_mode": WeightsMode(args.weights)})
    config = config.model_copy(update={"federation": federation})
    if args.rounds is not None:
        episodes = args.rounds * federation.aggregation_interval
        key = "gail" if args.method == Method.gail.value else "ppo"
        config = config.model_copy(update={key: getattr(config, key).model_copy(update={"episodes": episodes})})

    out = Path(config.output_dir)
    trained = harness.train_method(config, config.scenario, Method(args.method), _seed(config))
    nn.save_params(out / f"{args.method}_policy.lfnn", trained.policy)
    harness.write_frame(curves_frame(trained.curves), out / f"{args.method}_curves.csv")
    harness.write_frame(rounds_frame(trained.logs), out / f"{args.method}_rounds.csv")
    logger.info("Trained %s for %s rounds", args.method, len(trained.logs))
    _record(args, config, Method(args.method), logs=trained.logs)


def cmd_eval(args, config: ExperimentConfig) -> None:
    method = Method(args.method)
    policy = _load_policy(args.policy, method)
    rows = []
    for seed in config.seeds:
        summary = harness.evaluate_method(config.scenario, method, policy, args.episodes or config.eval_episodes,
                                          seed, config.woa, config.ppo.penalty)
        rows.append({
            "method": method.value,
            "sweep_value": 0.0,
            "seed": seed,
            "mean_se": summary.mean_se,
            "mean_reward": summary.mean_reward,
            "c1_violation_rate": summary.c1_violation_rate,
            "c2_violation_rate": summary.c2_violation_rate,
            "c8_violation_rate": summary.c8_violation_rate,
            "episodes_to_convergence": None,
        })
    metrics = pd.DataFrame(rows, columns=harness.METRIC_COLUMNS)
    harness.write_frame(metrics, Path(config.output_dir) / "metrics.csv")
    print(metrics.to_string(index=False))
    _record(args, config, method, metrics)


def cmd_sweep(args, config: ExperimentConfig) -> None:
    result = harness.run_sweep(config, config.output_dir)
    print(result.plot.to_string(index=False))
    logs = [log for cell in result.logs.values() for log in cell]
    _record(args, config, metrics=result.metrics, logs=logs)
    if not result.failures.empty:
        logger.error("%s sweep cells failed", len(result.failures))


def cmd_convergence(args, config: ExperimentConfig) -> None:
    result = harness.run_convergence(config, config.output_dir)
    print(result.summary.to_string(index=False))
    print(f"terminal gap: {result.gap:.6f}")
    _record(args, config)


def cmd_demo_gen(args, config: ExperimentConfig) -> None:
    woa = config.woa
    if args.pop is not None:
        woa = woa.model_copy(update={"population": args.pop})
    if args.iters is not None:
        woa = woa.model_copy(update={"iterations": args.iters})
    demo = expert.generate_demonstrations(config.scenario, args.episodes, woa, _seed(config))
    path = expert.write_demonstrations(Path(config.output_dir) / "demonstrations.lfdm", demo)
    print(f"{len(demo)} demonstrations written to {path}")


def cmd_match(args, config: ExperimentConfig) -> None:
    try:
        instance = MatchInstance.model_validate_json(Path(args.instance).read_text(encoding="utf-8"))
    except (OSError, ValidationError) as e:
        raise ConfigurationError(f"invalid matching instance {args.instance}: {e}") from e
    result = matching.solve_instance(instance)
    path = Path(config.output_dir) / "match.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(result.model_dump_json(indent=2))
    print(result.model_dump_json())


def cmd_snapshot(args, config: ExperimentConfig) -> None:
    snapshots = harness.snapshot_association(config.scenario, list(range(args.slots)), _seed(config),
                                             config.output_dir, args.interval)
    print(f"{len(snapshots)} snapshots written to {config.output_dir}")


def cmd_trace(args, config: ExperimentConfig) -> None:
    method = Method(args.method)
    policy = _load_policy(args.policy, method)
    trace = harness.trace_allocations(config.scenario, method, policy, args.slots, _seed(config), config.woa,
                                      config.output_dir)
    print(f"rank correlation (distance, power fraction): {harness.allocation_rank_correlation(trace):.4f}")


def cmd_serve(args, config: ExperimentConfig) -> None:
    import uvicorn

    uvicorn.run("app.main:app", host=args.host, port=args.port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leofed", description="LEO federated resource-allocation laboratory")
    parser.add_argument("--config", help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, help="override the config seeds with a single seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--log-level", default=None, help="logging level (default from LOG_LEVEL)")
    parser.add_argument("--db", nargs="?", const=DATABASE_URL, default=None,
                        help="record the run in a database (default DATABASE_URL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="federated training of a learned method")
    p.add_argument("--method", choices=[m.value for m in harness.LEARNED], default=Method.gail.value)
    p.add_argument("--rounds", type=int)
    p.add_argument("--agg-interval", type=int)
    p.add_argument("--weights", choices=[w.value for w in WeightsMode])
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a method on fresh episodes")
    p.add_argument("--method", choices=[m.value for m in Method], default=Method.fairness.value)
    p.add_argument("--policy", help="policy parameter file for gail/ppo")
    p.add_argument("--episodes", type=int)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("sweep", help="bandwidth, power or altitude sweep")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("convergence", help="paired learning curves")
    p.set_defaults(handler=cmd_convergence)

    p = sub.add_parser("demo-gen", help="generate expert demonstrations")
    p.add_argument("--episodes", type=int)
    p.add_argument("--pop", type=int)
    p.add_argument("--iters", type=int)
    p.set_defaults(handler=cmd_demo_gen)

    p = sub.add_parser("match", help="solve a standalone matching instance")
    p.add_argument("--instance", required=True)
    p.set_defaults(handler=cmd_match)

    p = sub.add_parser("snapshot", help="association snapshots")
    p.add_argument("--slots", type=int, default=1)
    p.add_argument("--interval", type=float, help="seconds between snapshots")
    p.set_defaults(handler=cmd_snapshot)

    p = sub.add_parser("trace", help="per-RUE allocation traces")
    p.add_argument("--method", choices=[m.value for m in Method], default=Method.expert.value)
    p.add_argument("--policy")
    p.add_argument("--slots", type=int, default=10)
    p.set_defaults(handler=cmd_trace)

    p = sub.add_parser("serve", help="run the gateway API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        config = _config(args)
        args.handler(args, config)
    except LeoFedError as e:
        logger.error("%s failed: %s", args.command, e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
