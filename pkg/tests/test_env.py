import logging

import numpy as np
import pytest

from app.engine import env
from app.engine.env import AgentAction, STATE_FEATURES
from app.exceptions import ConfigurationError, InfeasibleScenarioError, NumericalError
from app.schemas import PenaltyWeights
from tests.conftest import make_scenario


def _equal_actions(world):
    actions = []
    for agent in env.decision_schedule(world):
        mask = world.active_mask(agent)
        fractions = np.zeros((world.n_beam, 2))
        if mask.any():
            fractions[mask] = 1.0 / mask.sum()
        actions.append(AgentAction(agent_id=agent, fractions=fractions))
    return actions


def test_reset_builds_a_consistent_world(scenario):
    world = env.reset(scenario, seed=1)
    assert world.slot == 0 and world.t == 0.0
    assert world.sat_ids == [0, 1]
    assert world.demand.shape == (4,)
    assert np.all(world.tau == scenario.radio.tau_max)
    world.association.validate(scenario.radio.n_beam)
    served = sorted(u for s in world.sat_ids for u in world.beam_slots[s])
    assert served == sorted(u for _, u in world.association.pairs)
    assert world.actions.shape == (2, scenario.radio.n_beam, 2)


def test_reset_is_deterministic(scenario):
    a, b = env.reset(scenario, seed=5), env.reset(scenario, seed=5)
    for agent in env.decision_schedule(a):
        np.testing.assert_array_equal(env.observe(a, agent), env.observe(b, agent))
    assert a.association == b.association


def test_reset_rejects_infeasible_scenarios():
    with pytest.raises(InfeasibleScenarioError):
        env.reset(make_scenario(rue_count=0, num_clusters=1), seed=0)
    with pytest.raises(InfeasibleScenarioError):
        env.reset(make_scenario(min_elevation_deg=90.0), seed=0)


def test_observation_layout(scenario):
    world = env.reset(scenario, seed=2)
    for agent in world.sat_ids:
        state = env.observe(world, agent)
        assert state.shape == (env.state_dim(scenario),)
        rows = state.reshape(scenario.radio.n_beam, STATE_FEATURES)
        active = world.active_mask(agent)
        np.testing.assert_array_equal(rows[active, 2], 1.0)
        np.testing.assert_array_equal(rows[~active], 0.0)
        assert np.all(np.isfinite(state))
    with pytest.raises(ConfigurationError):
        env.observe(world, 99)


def test_squash_action_stays_within_budget():
    mask = np.array([True, True, False])
    fractions = env.squash_action(np.full(6, 10.0), mask)
    np.testing.assert_array_equal(fractions[2], 0.0)
    np.testing.assert_allclose(fractions.sum(axis=0), 1.0)

    small = env.squash_action(np.full(6, -10.0), mask)
    assert np.all(small.sum(axis=0) < 1.0)
    assert np.all(small[:2] > 0)


def test_check_constraints_magnitudes():
    sinr = np.array([[2.0, 0.5, 0.0]])
    rate = np.array([[1e6, 1e6, 0.0]])
    associated = np.array([[True, True, False]])
    demand = np.array([1e4, 0.0, 5.0])
    tau = np.array([0.01, 0.01, 0.01])

    checked, c1, c2, c8 = env.check_constraints(sinr, rate, associated, demand, tau, gamma_min=1.0, r_back=1e6)

    np.testing.assert_array_equal(checked, [True, True, False])
    np.testing.assert_allclose(c1, [0.0, 0.0, 0.0])
    np.testing.assert_allclose(c2, [0.0, 0.5, 0.0])
    np.testing.assert_allclose(c8, [1.0])

    _, c1, _, _ = env.check_constraints(sinr, rate * 0.25, associated, demand, tau, 1.0, 1e9)
    assert c1[0] == pytest.approx(0.75)
    _, c1, _, _ = env.check_constraints(sinr, rate, associated, demand, np.zeros(3), 1.0, 1e9)
    assert c1[0] == 1.0 and c1[1] == 0.0


def test_zero_allocation_earns_nothing_and_violates_demand(scenario):
    world = env.reset(scenario, seed=3)
    outcome = env.evaluate_allocation(world)
    assert outcome.gamma_tot == 0.0
    assert np.all(outcome.c1_violated[outcome.checked])
    reward = env.handcrafted_reward(outcome, PenaltyWeights())
    assert reward == pytest.approx(-outcome.penalty(PenaltyWeights()))


def test_evaluate_allocation_leaves_the_world_untouched(scenario):
    world = env.reset(scenario, seed=4)
    held = world.actions.copy()
    demand = world.demand.copy()
    actions = {a.agent_id: a.fractions for a in _equal_actions(world)}
    outcome = env.evaluate_allocation(world, actions)
    assert outcome.gamma_tot > 0
    np.testing.assert_array_equal(world.actions, held)
    np.testing.assert_array_equal(world.demand, demand)
    assert world.slot == 0


def test_step_updates_demand_latency_and_time(scenario):
    world = env.reset(scenario, seed=6)
    demand = world.demand.copy()
    outcome = env.apply_action_and_step(world, _equal_actions(world))

    dt = scenario.episode.slot_s
    served = outcome.rate.sum(axis=0)
    np.testing.assert_allclose(world.demand, np.maximum(0.0, demand - served * dt))
    np.testing.assert_allclose(world.tau, scenario.radio.tau_max - dt)
    assert world.slot == 1 and world.t == pytest.approx(dt)
    assert outcome.se_per_sat.sum() == pytest.approx(outcome.gamma_tot)
    assert len(env.trace_frame(world)) == len(world.sat_ids)


def test_episode_ends_after_num_slots(scenario):
    world = env.reset(scenario, seed=7)
    while not world.done:
        env.apply_action_and_step(world, _equal_actions(world))
    assert world.slot == scenario.episode.num_slots
    with pytest.raises(ConfigurationError):
        env.apply_action_and_step(world, [])


def test_agents_without_actions_hold_their_fractions(scenario):
    world = env.reset(scenario, seed=8)
    first = _equal_actions(world)
    env.apply_action_and_step(world, first)
    held = world.actions.copy()
    env.apply_action_and_step(world, [])
    np.testing.assert_array_equal(world.actions, held)


def test_sub_slots_collapse_into_one_evaluation(scenario):
    world = env.reset(scenario, seed=12)
    first, second = _equal_actions(world)
    state = env.observe(world, second.agent_id)
    world.actions[world.sat_index(first.agent_id)] = first.fractions * 0.5
    np.testing.assert_array_equal(env.observe(world, second.agent_id), state)

    world = env.reset(scenario, seed=12)
    expected = env.evaluate_allocation(world, {a.agent_id: a.fractions for a in (first, second)})
    outcome = env.apply_action_and_step(world, [first, second])
    assert outcome.gamma_tot == pytest.approx(expected.gamma_tot, rel=1e-12)
    np.testing.assert_allclose(outcome.rate, expected.rate, rtol=1e-12)


def test_actions_must_follow_the_schedule(scenario):
    world = env.reset(scenario, seed=9)
    actions = _equal_actions(world)
    with pytest.raises(ConfigurationError):
        env.apply_action_and_step(world, list(reversed(actions)))
    with pytest.raises(ConfigurationError):
        env.apply_action_and_step(world, [AgentAction(agent_id=42, fractions=np.zeros((2, 2)))])


def test_invalid_fractions_are_rejected_or_repaired(scenario, caplog):
    world = env.reset(scenario, seed=10)
    bad = np.full((scenario.radio.n_beam, 2), np.nan)
    with pytest.raises(NumericalError):
        env.apply_action_and_step(world, [AgentAction(agent_id=0, fractions=bad)])

    too_much = np.full((scenario.radio.n_beam, 2), 1.5)
    with caplog.at_level(logging.WARNING):
        env.apply_action_and_step(world, [AgentAction(agent_id=0, fractions=too_much)])
    assert np.all(world.actions[0].sum(axis=0) <= 1.0 + env.SUM_TOL)
    assert any("agent 0" in r.getMessage() for r in caplog.records)


def test_spectrum_efficiency_does_not_depend_on_total_bandwidth():
    narrow = make_scenario()
    wide = narrow.model_copy(update={"radio": narrow.radio.model_copy(update={"b_tot_mhz": 900.0})})
    a, b = env.reset(narrow, seed=11), env.reset(wide, seed=11)
    out_a = env.evaluate_allocation(a, {x.agent_id: x.fractions for x in _equal_actions(a)})
    out_b = env.evaluate_allocation(b, {x.agent_id: x.fractions for x in _equal_actions(b)})
    assert out_b.gamma_tot == pytest.approx(out_a.gamma_tot, rel=1e-9)


def test_advance_to_moves_the_constellation(scenario):
    world = env.reset(scenario, seed=12)
    x0 = [s.x_km for s in world.sats]
    env.advance_to(world, 2.0)
    assert world.t == 2.0
    for before, sat in zip(x0, world.sats):
        assert sat.x_km - before == pytest.approx(2.0 * scenario.constellation.sat_speed_kms)


def test_write_trace(tmp_path, scenario):
    world = env.reset(scenario, seed=13)
    env.apply_action_and_step(world, _equal_actions(world))
    path = env.write_trace(world, tmp_path / "trace.csv")
    assert path.read_text().splitlines()[0] == "slot,agent,action,gamma_tot,c1,c2,c8"
