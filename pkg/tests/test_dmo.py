import dataclasses
import itertools

import numpy as np
import pytest

from conftest import MICRO_DATA, MICRO_IMPORTANCE, micro_channel, micro_config, micro_decision, micro_history
from fedtwin.drl.dmo import (
    DimensionMismatch,
    DmoAgents,
    DmoConfig,
    StageContext,
    StateEncoder,
    compute_rewards,
    decode_preference_action,
    decode_resource_action,
    dmo_step,
    dmo_train,
    encode_state,
    run_dmo_episode,
)
from fedtwin.drl.ppo import PPOConfig
from fedtwin.harness.scenario import ScenarioTemplate, generate_scenario
from fedtwin.matching import gale_shapley
from fedtwin.model import ScenarioConfig, check_decision, evaluate_frame
from fedtwin.sim import EpisodeState

TINY = ScenarioTemplate(num_partial_dts=2, num_ess=2, num_sensors=4, num_subcarriers=3, max_assoc_per_sensor=2)


def _ctx(cfg, fill=0.0):
    C, B, N, W = cfg.num_partial_dts, cfg.num_ess, cfg.num_sensors, cfg.num_subcarriers
    return StageContext(
        importance=np.full(C, fill),
        prev_collected=np.full(C, fill),
        cumulative=np.full(C, fill),
        prev_quality=np.full(C, fill),
        prev_assignment=np.zeros((C, B)),
        stage1_assignment=np.zeros((C, B)),
        association=np.zeros((B, N)),
        subcarriers=np.zeros((B, N, W)),
        round_fraction=np.zeros(B),
        prev_round_fraction=np.zeros(B),
    )


def test_encoder_sizes_for_default_layout():
    cfg = ScenarioConfig()
    enc = StateEncoder(cfg, 600e3, 100)
    assert enc.sizes("0") == 109
    assert enc.sizes("C") == 1120
    assert enc.sizes("B") == 45
    for agent_id in ("0", "4", "C", "B"):
        v = encode_state(enc, _ctx(cfg), agent_id)
        assert v.shape == (enc.sizes(agent_id),)
        assert not v.any()


def test_encoder_normalizes_to_unit_interval():
    cfg = ScenarioConfig()
    enc = StateEncoder(cfg, 600e3, 100)
    ctx = _ctx(cfg, fill=1.0)
    ctx.prev_collected = np.full(5, 1e12)
    ctx.cumulative = np.full(5, 1e15)
    ctx.association = np.zeros((5, 20))
    ctx.association[:, :10] = 1  # full coalitions: one member per subcarrier
    ctx.stage1_assignment = np.eye(5)
    for agent_id in ("0", "C", "B"):
        v = enc.encode(ctx, agent_id)
        assert v.min() >= 0.0 and v.max() <= 1.0


def test_encoder_rejects_wrong_shape():
    cfg = ScenarioConfig()
    ctx = _ctx(cfg)
    ctx.association = np.zeros((3, 3))
    with pytest.raises(DimensionMismatch):
        StateEncoder(cfg, 600e3, 100).encode(ctx, "0")


def _feasible(z, members):
    # one carrier per granted sensor, each carrier used once, only members hold carriers
    return (z.sum(axis=1) <= 1).all() and (z.sum(axis=0) <= 1).all() and set(np.nonzero(z.sum(axis=1))[0]) <= set(members)


def test_three_members_two_carriers_grants_top_two():
    gains = np.array([[0.2, 0.6], [0.4, 0.4], [0.6, 0.2], [0.6, 0.6]])
    out = np.array([0.5, 0.9, 0.7, 2.0, 0.0])  # sensor 3 is not a member
    z, granted, rounds, frac = decode_resource_action(out, [0, 1, 2], gains, 10, 2)
    assert granted == [1, 2]
    assert _feasible(z, [0, 1, 2])
    # exhaustive filter: among all feasible grants of two carriers, ours serves the two best scores
    best = max(
        (pair for pair in itertools.combinations([0, 1, 2], 2)),
        key=lambda pair: sum(out[n] for n in pair),
    )
    assert tuple(granted) == best
    # sensor 1 ties on both carriers and takes the lower index; sensor 2 gets the other
    assert z[1, 0] == 1 and z[2, 1] == 1 and z.sum() == 2
    assert rounds == 5 and frac == 0.5


def test_resource_decoder_boundaries():
    gains = np.full((3, 2), 0.4)
    z, granted, rounds, _ = decode_resource_action(np.array([1.0, 1.0, 1.0, 50.0]), [], gains, 17, 2)
    assert granted == [] and not z.any() and rounds == 17
    _, _, rounds, _ = decode_resource_action(np.array([1.0, 1.0, 1.0, -50.0]), [0], gains, 17, 2)
    assert rounds == 0
    z, granted, _, _ = decode_resource_action(np.array([-1.0, 0.5, 0.0, 0.0]), [0, 1, 2], gains, 4, 2)
    assert granted == [1]  # non-positive scores are withheld


def test_preference_decoder():
    out = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    p = decode_preference_action(out, out, 2, 3)
    assert (p.dt_prefs == 0.5).all() and p.es_prefs.shape == (3, 2)
    assert gale_shapley(p).es_of_dt == (0, 1)
    rng = np.random.default_rng(0)
    p = decode_preference_action(rng.normal(0, 5, 6), rng.normal(0, 5, 6), 2, 3)
    assert p.dt_prefs.min() >= 0 and p.dt_prefs.max() <= 1
    dom = np.full(6, -5.0)
    dom[2] = dom[3] = 5.0  # DT0 -> ES2, DT1 -> ES0
    es = np.zeros(6)
    assert gale_shapley(decode_preference_action(dom, es, 2, 3)).es_of_dt == (2, 0)


def _outcome():
    cfg = micro_config()
    out = evaluate_frame(cfg, micro_channel(), micro_decision(), micro_history(), MICRO_DATA, MICRO_IMPORTANCE)
    return cfg, out


def test_rewards_when_deadline_met():
    cfg, out = _outcome()
    r = compute_rewards(cfg, out)
    assert r["0"] == out.es_utilities[0] and r["1"] == out.es_utilities[1]
    assert r["C"] == out.cloud_utility
    assert r["B"] == pytest.approx(out.es_utilities.sum(), abs=1e-12)
    exact = compute_rewards(dataclasses.replace(cfg, frame_deadline_s=out.total_latency), out)
    assert exact == r


def test_rewards_one_second_late():
    cfg, out = _outcome()
    late = dataclasses.replace(out, total_latency=cfg.frame_deadline_s + 1.0, deadline_met=False)
    r = compute_rewards(cfg, late)
    assert set(r) == {"0", "1", "C", "B"}
    for v in r.values():
        assert v == pytest.approx(-10.0, abs=1e-12)


def _tiny_agents(seed=0, **kw):
    world = generate_scenario(3, TINY)
    dmo = DmoConfig(ppo=PPOConfig(minibatch_size=32), **kw)
    return world, DmoAgents(world.config, dmo, seed, 600e3)


def test_episode_fills_one_tuple_per_frame_and_decisions_are_feasible():
    world, agents = _tiny_agents()
    rng = np.random.default_rng(0)
    seen = []

    def check(t, result):
        assert not check_decision(world.config, result.decision, result.outcome.max_rounds)
        seen.append(t)

    run_dmo_episode(agents, world, 100, rng, explore=True, store=True, on_frame=check)
    assert seen == list(range(1, 101))
    for agent in agents.all():
        assert len(agent.buffer[0]) == 100
        ep = agent.buffer[0]
        assert all(np.array_equal(a.next_state, b.state) for a, b in zip(ep, ep[1:]))


def test_full_scale_step_is_feasible():
    world = generate_scenario(0)
    agents = DmoAgents(world.config, DmoConfig(), 0, 600e3)
    state = EpisodeState.start(world.config)
    rng = np.random.default_rng(0)
    for t in (1, 2, 3):
        res = dmo_step(agents, world.config, world.inputs(t), state, rng)
        assert not check_decision(world.config, res.decision, res.outcome.max_rounds)
        state = state.advance(res.decision, res.outcome)


def test_training_is_deterministic():
    worlds = [generate_scenario(s, TINY) for s in (1, 2)]
    dmo = DmoConfig(ppo=PPOConfig(minibatch_size=32), update_every=2)
    a = dmo_train(worlds, 4, 10, dmo, seed=5)
    b = dmo_train(worlds, 4, 10, dmo, seed=5)
    assert a.curve == b.curve
    for x, y in zip(a.agents.all(), b.agents.all()):
        for p, q in zip(x.actor.params, y.actor.params):
            np.testing.assert_array_equal(p, q)


def test_zero_learning_rate_leaves_policy_unchanged():
    worlds = [generate_scenario(1, TINY)]
    dmo = DmoConfig(ppo=PPOConfig(lr=0.0, minibatch_size=32), update_every=1)
    res = dmo_train(worlds, 3, 10, dmo, seed=0)
    fresh = DmoAgents(worlds[0].config, dmo, 0, 600e3)
    for x, y in zip(res.agents.all(), fresh.all()):
        for p, q in zip(x.actor.params, y.actor.params):
            np.testing.assert_array_equal(p, q)


def test_checkpoint_roundtrip(tmp_path):
    world, agents = _tiny_agents()
    res = dmo_train([world], 2, 5, agents.dmo, seed=0, agents=agents)
    path = tmp_path / "agents.npz"
    rng = np.random.default_rng(42)
    res.agents.save(path, rng)
    other = DmoAgents(world.config, agents.dmo, 99, 600e3)
    state = other.load(path)
    assert state == rng.bit_generator.state
    r1 = run_dmo_episode(res.agents, world, 5, np.random.default_rng(0), explore=False, store=False)
    r2 = run_dmo_episode(other, world, 5, np.random.default_rng(0), explore=False, store=False)
    assert r1 == r2


def test_exhaustive_stage1_on_tiny_instance():
    world, agents = _tiny_agents(exhaustive_stage1=True)
    rng = np.random.default_rng(1)
    state = EpisodeState.start(world.config)
    for t in (1, 2):
        res = dmo_step(agents, world.config, world.inputs(t), state, rng)
        assert not check_decision(world.config, res.decision, res.outcome.max_rounds)
        state = state.advance(res.decision, res.outcome)
