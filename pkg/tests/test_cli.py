import json

import pytest
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

from app import cli, models
from app.engine import expert, nn


@pytest.fixture
def config_file(tmp_path, experiment_config):
    path = tmp_path / "experiment.json"
    path.write_text(experiment_config.model_dump_json())
    return path


def _run(config_file, out, *args):
    return cli.main(["--config", str(config_file), "--out", str(out), *args])


def test_match_command(tmp_path, config_file):
    instance = tmp_path / "instance.json"
    instance.write_text(json.dumps({"capacities": {"0": 1, "1": 1},
                                    "gain_scores": {"0": {"0": 5.0, "1": 1.0}, "1": {"0": 3.0, "1": 2.0}}}))
    assert _run(config_file, tmp_path / "out", "match", "--instance", str(instance)) == 0
    result = json.loads((tmp_path / "out" / "match.json").read_text())
    assert result["assignment"] == {"0": 0, "1": 1}


def test_match_with_a_broken_instance(tmp_path, config_file):
    instance = tmp_path / "instance.json"
    instance.write_text("{}")
    assert _run(config_file, tmp_path / "out", "match", "--instance", str(instance)) == 1


def test_demo_gen_command(tmp_path, config_file, experiment_config):
    assert _run(config_file, tmp_path / "out", "demo-gen", "--episodes", "1", "--pop", "3", "--iters", "1") == 0
    demo = expert.read_demonstrations(tmp_path / "out" / "demonstrations.lfdm")
    scenario = experiment_config.scenario
    assert len(demo) == scenario.episode.num_slots * scenario.constellation.num_sats
    assert demo.woa.population == 3 and demo.woa.iterations == 1


def test_eval_is_byte_identical_on_rerun(tmp_path, config_file):
    assert _run(config_file, tmp_path / "a", "eval", "--method", "fairness") == 0
    assert _run(config_file, tmp_path / "b", "eval", "--method", "fairness") == 0
    first = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert first == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert first.startswith(b"method,sweep_value,seed,mean_se")


def test_train_then_eval_the_policy(tmp_path, config_file):
    out = tmp_path / "out"
    assert _run(config_file, out, "train", "--method", "ppo", "--rounds", "2") == 0
    assert nn.load_params(out / "ppo_policy.lfnn").head is nn.HeadKind.gaussian
    assert (out / "ppo_rounds.csv").read_text().count("\n") == 3
    assert _run(config_file, out, "eval", "--method", "ppo", "--policy", str(out / "ppo_policy.lfnn")) == 0


def test_learned_eval_needs_a_policy(tmp_path, config_file):
    assert _run(config_file, tmp_path / "out", "eval", "--method", "gail") == 1


def test_snapshot_command(tmp_path, config_file):
    assert _run(config_file, tmp_path / "out", "snapshot", "--slots", "2") == 0
    assert sorted(p.name for p in (tmp_path / "out").glob("snapshot_*.json")) == \
        ["snapshot_00000.json", "snapshot_00001.json"]


def test_bad_config_exits_with_one(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"seeds": "many"}')
    assert cli.main(["--config", str(bad), "eval"]) == 1
    assert cli.main(["--config", str(tmp_path / "missing.json"), "eval"]) == 1


def test_db_flag_records_the_run(tmp_path, config_file):
    url = f"sqlite:///{tmp_path / 'runs.db'}"
    assert _run(config_file, tmp_path / "out", "--db", url, "eval", "--method", "fairness") == 0

    session = sessionmaker(bind=create_engine(url))()
    try:
        [run] = session.query(models.ExperimentRun).all()
        assert run.command == "eval" and run.method == "fairness"
        assert len(run.metrics) == 1
    finally:
        session.close()


def test_sweep_and_trace_commands(tmp_path, config_file):
    out = tmp_path / "out"
    assert _run(config_file, out, "sweep") == 0
    assert (out / "metrics.csv").exists() and (out / "plot_none.csv").exists()
    assert _run(config_file, out, "trace", "--method", "fairness", "--slots", "2") == 0
    assert (out / "trace_fairness.csv").exists()


def test_convergence_without_learned_methods_fails(tmp_path, config_file):
    assert _run(config_file, tmp_path / "out", "convergence") == 1
