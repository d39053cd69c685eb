import numpy as np
import pytest

from app.engine import env, expert
from app.engine.baselines import fairness_policy
from app.exceptions import ConfigurationError, FileFormatError
from app.schemas import EpisodeConfig, WoaConfig
from tests.conftest import make_scenario


def test_woa_finds_the_peak_of_a_toy_landscape():
    target = np.array([0.3, 0.7])
    result = expert.woa_maximize(lambda x: -float(np.sum((x - target) ** 2)), 2, 20, 100,
                                 np.random.default_rng(0))
    np.testing.assert_allclose(result.position, target, atol=1e-2)
    assert result.evaluations == 20 * 101
    assert all(b >= a for a, b in zip(result.history, result.history[1:]))


def test_woa_returns_the_best_evaluated_candidate():
    seen = []

    def fitness(x):
        value = float(np.sin(7 * x[0]) + np.cos(3 * x[1]))
        seen.append(value)
        return value

    result = expert.woa_maximize(fitness, 2, 2, 1, np.random.default_rng(3))
    assert result.evaluations == len(seen) == 4
    assert result.fitness == max(seen)


def test_woa_without_iterations_keeps_the_best_initial_whale():
    rng = np.random.default_rng(4)
    initial = np.random.default_rng(4).uniform(0.0, 1.0, size=(5, 3))
    result = expert.woa_maximize(lambda x: float(x.sum()), 3, 5, 0, rng)
    np.testing.assert_array_equal(result.position, initial[np.argmax(initial.sum(axis=1))])
    assert result.history == []


def test_woa_needs_two_whales():
    with pytest.raises(ConfigurationError):
        expert.woa_maximize(lambda x: 0.0, 2, 1, 5, np.random.default_rng(0))


def test_decoded_positions_respect_each_budget(scenario):
    world = env.reset(scenario, seed=0)
    dim = sum(len(world.beam_slots[s]) for s in world.sat_ids) * 2
    actions = expert.decode_position(world, np.ones(dim))
    for agent, fractions in actions.items():
        assert fractions.shape == (scenario.radio.n_beam, 2)
        assert np.all(fractions.sum(axis=0) <= 1.0 + 1e-12)
        np.testing.assert_array_equal(fractions[~world.active_mask(agent)], 0.0)


def test_single_link_expert_matches_grid_search():
    scenario = make_scenario(num_sats=1, rue_count=1, num_clusters=1, n_beam=1)
    scenario = scenario.model_copy(update={
        "episode": EpisodeConfig(num_slots=1, demand_min_mbit=1e4, demand_max_mbit=1e4),
    })
    world = env.reset(scenario, seed=1)
    assert world.beam_slots[0] == [0]

    solution = expert.woa_solve(world, iterations=50, population=20, seed=2)

    best_fitness, best_gamma = -np.inf, 0.0
    for p in np.linspace(0.0, 1.0, 41):
        for eta in np.linspace(0.0, 1.0, 41):
            outcome = env.evaluate_allocation(world, {0: np.array([[p, eta]])})
            fitness = expert.expert_fitness(outcome, 10.0)
            if fitness > best_fitness:
                best_fitness, best_gamma = fitness, outcome.gamma_tot
    assert solution.outcome.gamma_tot >= 0.99 * best_gamma


def test_woa_solve_does_not_change_the_world(scenario):
    world = env.reset(scenario, seed=5)
    held = world.actions.copy()
    expert.woa_solve(world, iterations=2, population=3, seed=0)
    np.testing.assert_array_equal(world.actions, held)
    assert world.slot == 0


def test_episodes_for_covers_the_requested_count(scenario):
    per_episode = scenario.episode.num_slots * scenario.constellation.num_sats
    assert expert.episodes_for(scenario, per_episode) == 1
    assert expert.episodes_for(scenario, per_episode + 1) == 2


def test_generate_demonstrations_records_every_agent_each_slot(scenario, woa_config):
    demo = expert.generate_demonstrations(scenario, 1, woa_config, seed=3)
    slots = scenario.episode.num_slots
    assert len(demo) == slots * 2
    assert demo.state_dim == env.state_dim(scenario)
    assert demo.action_dim == env.action_dim(scenario)
    np.testing.assert_array_equal(demo.agent_ids, [0, 1] * slots)
    sums = demo.actions.reshape(len(demo), scenario.radio.n_beam, 2).sum(axis=1)
    assert np.all(sums <= 1.0 + 1e-9)
    assert len(demo.slot_gamma_tot) == slots
    assert demo.scenario_hash == expert.scenario_hash(scenario)


def test_generate_demonstrations_is_deterministic(scenario, woa_config):
    a = expert.generate_demonstrations(scenario, 1, woa_config, seed=9)
    b = expert.generate_demonstrations(scenario, 1, woa_config, seed=9)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.actions, b.actions)


def test_demonstration_file_round_trip(tmp_path, scenario, woa_config):
    demo = expert.generate_demonstrations(scenario, 1, woa_config, seed=4)
    path = expert.write_demonstrations(tmp_path / "demo.lfdm", demo)
    loaded = expert.read_demonstrations(path)
    np.testing.assert_array_equal(loaded.states, demo.states)
    np.testing.assert_array_equal(loaded.actions, demo.actions)
    np.testing.assert_array_equal(loaded.agent_ids, demo.agent_ids)
    assert loaded.scenario_hash == demo.scenario_hash
    assert loaded.seed == 4
    assert loaded.woa.population == woa_config.population
    assert loaded.woa.iterations == woa_config.iterations


def test_read_demonstrations_rejects_bad_files(tmp_path, scenario, woa_config):
    with pytest.raises(FileFormatError):
        expert.read_demonstrations(tmp_path / "missing.lfdm")

    demo = expert.generate_demonstrations(scenario, 1, woa_config, seed=4)
    path = expert.write_demonstrations(tmp_path / "demo.lfdm", demo)
    data = path.read_bytes()
    path.write_bytes(data[:-1])
    with pytest.raises(FileFormatError):
        expert.read_demonstrations(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FileFormatError):
        expert.read_demonstrations(path)


@pytest.mark.slow
def test_expert_beats_equal_split_on_matched_seeds(scenario):
    woa = WoaConfig(population=10, iterations=20)
    for seed in range(3):
        demo = expert.generate_demonstrations(scenario, 1, woa, seed=seed)
        world = env.reset(scenario, seed)
        fair = []
        while not world.done:
            actions = [fairness_policy(world, a) for a in env.decision_schedule(world)]
            fair.append(env.apply_action_and_step(world, actions).gamma_tot)
        assert np.mean(demo.slot_gamma_tot) > np.mean(fair)


def test_woa_gap_shrinks_with_budget():
    target = np.array([0.2, 0.4, 0.6, 0.8])

    def fitness(x):
        return -float(np.sum((x - target) ** 2))

    medians = []
    for budget in (10, 50, 200):
        gaps = [-expert.woa_maximize(fitness, 4, 10, budget, np.random.default_rng(seed)).fitness
                for seed in range(20)]
        medians.append(np.median(gaps))
    assert medians[0] > medians[1] > medians[2]
