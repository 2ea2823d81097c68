"""Frame-by-frame orchestration of the two-stage learning approach.

Stage 1: one agent per ES emits sensor priority scores and a round fraction;
coalition formation runs on top of them. Stage 2: a DT-side agent and an
ES-side agent emit preference grids, and deferred acceptance fixes the
DT-to-ES assignment.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..coalition import CoalitionPartition, SocfTrace, socf
from ..matching import Matching, PreferenceLists, gale_shapley
from ..model import (
    FrameDecision,
    FrameOutcome,
    ScenarioConfig,
    check_decision,
    collected_data,
    default_assignment,
    es_dt_index,
    evaluate_frame,
    frame_max_rounds,
)
from ..sim import EpisodeState, FrameInputs, deadline_penalty, round_half_up, shaped_utility
from .ppo import PPOAgent, PPOConfig, Transition, train_on_buffer

STATE_LAYOUT_VERSION = 1


class DimensionMismatch(ValueError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


@dataclass
class DmoConfig:
    ppo: PPOConfig = field(default_factory=PPOConfig)
    pref_init_log_std: float = -3.0
    pref_out_scale: float = 0.0
    pref_prior_logit: float = 2.0  # initial preference margin for the default pairing
    score_init_bias: float = -0.3  # initial sensor priority offset; negative starts from small coalitions
    fraction_init_bias: float = 0.0  # initial round-fraction logit
    stage1_round_cap: int = 2
    update_every: int = 4  # episodes between PPO updates
    horizon: int = 100  # frames used to scale cumulative-data features
    exhaustive_stage1: bool = False  # enumerate all assignments in Stage 1 (tiny instances only)


@dataclass
class StageContext:
    """What the agents may observe at one decision point of frame t."""

    importance: np.ndarray  # (C,)
    prev_collected: np.ndarray  # d_c(t-1) (C,)
    cumulative: np.ndarray  # sum of d_c before t (C,)
    prev_quality: np.ndarray  # A_c(t-1) (C,)
    prev_assignment: np.ndarray  # x(t-1) (C, B)
    stage1_assignment: np.ndarray  # assignment under which Stage 1 runs (C, B)
    association: np.ndarray  # current partition as y (B, N)
    subcarriers: np.ndarray  # current z (B, N, W)
    round_fraction: np.ndarray  # current per-ES round fraction (B,)
    prev_round_fraction: np.ndarray  # (B,)


class StateEncoder:
    """Flattens a StageContext to each agent's input vector, scaled to [0, 1]."""

    def __init__(self, config: ScenarioConfig, data_max_bits: float, horizon: int):
        self.C, self.B = config.num_partial_dts, config.num_ess
        self.N, self.W = config.num_sensors, config.num_subcarriers
        self.frame_norm = max(self.N * data_max_bits, 1.0)
        self.cum_norm = self.frame_norm * max(horizon, 1)

    def sizes(self, agent_id: str) -> int:
        C, B, N, W = self.C, self.B, self.N, self.W
        if agent_id == "C":
            return 3 * C + B * (1 + N * (W + 1))
        if agent_id == "B":
            return C * (4 + B)
        return (4 + B) + B * N

    def _dt_features(self, ctx: StageContext):
        d_prev = np.clip(ctx.prev_collected / self.frame_norm, 0.0, 1.0)
        cum = np.clip(ctx.cumulative / self.cum_norm, 0.0, 1.0)
        return np.asarray(ctx.importance, dtype=float), d_prev, cum

    def encode(self, ctx: StageContext, agent_id: str) -> np.ndarray:
        imp, d_prev, cum = self._dt_features(ctx)
        y = np.asarray(ctx.association, dtype=float)
        if y.shape != (self.B, self.N):
            raise DimensionMismatch(f"association shape {y.shape} does not match ({self.B}, {self.N})")
        if agent_id == "C":
            z = np.asarray(ctx.subcarriers, dtype=float)
            per_sensor = np.concatenate([y[:, :, None], z], axis=2).reshape(self.B, -1)
            per_es = np.concatenate([np.asarray(ctx.round_fraction, dtype=float)[:, None], per_sensor], axis=1)
            return np.concatenate([imp, d_prev, cum, per_es.ravel()])
        if agent_id == "B":
            x = np.asarray(ctx.prev_assignment, dtype=float)
            per_dt = np.stack([imp, d_prev, cum, np.asarray(ctx.prev_quality, dtype=float)], axis=1)
            return np.concatenate([per_dt, x], axis=1).ravel()
        b = int(agent_id)
        head = np.zeros(4)
        c = es_dt_index(ctx.stage1_assignment)[b]
        if c >= 0:
            head = np.array([imp[c], d_prev[c], cum[c], ctx.prev_round_fraction[b]])
        sizes = y.sum(axis=1) / self.W
        return np.concatenate([head, sizes, y.ravel()])


def encode_state(encoder: StateEncoder, ctx: StageContext, agent_id: str) -> np.ndarray:
    return encoder.encode(ctx, agent_id)


def decode_resource_action(output, members, gains_b: np.ndarray, t_star: float, num_subcarriers: int):
    """Subcarriers by descending priority score, each to the best-gain free carrier.

    Members with a non-positive score are withheld, which drops them from the
    association for this frame. Returns (z_b of shape (N, W), granted member list, T_b, round fraction).
    """
    output = np.asarray(output, dtype=float)
    n_sensors = len(output) - 1
    scores = output[:n_sensors]
    z = np.zeros((n_sensors, num_subcarriers), dtype=np.int64)
    free = np.ones(num_subcarriers, dtype=bool)
    order = sorted((n for n in members if scores[n] > 0), key=lambda n: (-scores[n], n))
    granted = []
    for n in order:
        if not free.any():
            break
        w = int(np.argmax(np.where(free, gains_b[n], -np.inf)))
        z[n, w] = 1
        free[w] = False
        granted.append(n)
    fraction = float(sigmoid(output[n_sensors]))
    rounds = min(round_half_up(fraction * t_star), int(t_star))
    return z, sorted(granted), rounds, fraction


def decode_preference_action(out_c, out_b, num_dts: int, num_ess: int) -> PreferenceLists:
    dt = sigmoid(out_c).reshape(num_dts, num_ess)
    es = sigmoid(out_b).reshape(num_ess, num_dts)
    return PreferenceLists(dt, es)


def compute_rewards(config: ScenarioConfig, outcome: FrameOutcome) -> dict[str, float]:
    penalty = deadline_penalty(config, outcome)
    met = outcome.deadline_met
    out = {}
    for b, u in enumerate(outcome.es_utilities):
        out[str(b)] = (float(u) if met else 0.0) - penalty
    out["C"] = (outcome.cloud_utility if met else 0.0) - penalty
    out["B"] = (float(outcome.es_utilities.sum()) if met else 0.0) - penalty
    return out


class DmoAgents:
    """agt_C, agt_B and one agt_b per ES for a fixed scenario shape."""

    def __init__(self, config: ScenarioConfig, dmo: DmoConfig, seed: int, data_max_bits: float):
        self.dmo = dmo
        self.encoder = StateEncoder(config, data_max_bits, dmo.horizon)
        self.C, self.B, self.N = config.num_partial_dts, config.num_ess, config.num_sensors
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        self.es_agents = [
            PPOAgent(str(b), self.encoder.sizes(str(b)), self.N + 1, dmo.ppo, rng) for b in range(self.B)
        ]
        pref_cfg = PPOConfig(**{**dmo.ppo.__dict__, "init_log_std": dmo.pref_init_log_std, "actor_out_scale": dmo.pref_out_scale})
        self.agent_c = PPOAgent("C", self.encoder.sizes("C"), self.B * self.C, pref_cfg, rng)
        self.agent_b = PPOAgent("B", self.encoder.sizes("B"), self.B * self.C, pref_cfg, rng)
        for agent in self.es_agents:
            agent.actor.params[-1][:-1] = dmo.score_init_bias
            agent.actor.params[-1][-1] = dmo.fraction_init_bias
        # both sides start out preferring the default pairing (DT c with ES c), so
        # exploration perturbs a fixed matching instead of breaking exact ties
        prior = dmo.pref_prior_logit * np.eye(self.C, self.B)
        self.agent_c.actor.params[-1][:] = prior.ravel()
        self.agent_b.actor.params[-1][:] = prior.T.ravel()

    def all(self) -> list[PPOAgent]:
        return self.es_agents + [self.agent_c, self.agent_b]

    def by_id(self, agent_id: str) -> PPOAgent:
        if agent_id == "C":
            return self.agent_c
        if agent_id == "B":
            return self.agent_b
        return self.es_agents[int(agent_id)]

    def save(self, path: str | Path, rng: np.random.Generator | None = None) -> None:
        arrays = {"layout_version": np.array(STATE_LAYOUT_VERSION)}
        for agent in self.all():
            for k, v in agent.state_dict().items():
                arrays[f"{agent.agent_id}/{k}"] = v
        if rng is not None:
            arrays["rng_state"] = np.array(json.dumps(rng.bit_generator.state))
        np.savez(path, **arrays)

    def load(self, path: str | Path) -> dict | None:
        with np.load(path, allow_pickle=False) as data:
            if int(data["layout_version"]) != STATE_LAYOUT_VERSION:
                raise DimensionMismatch("checkpoint state layout does not match this build")
            for agent in self.all():
                prefix = f"{agent.agent_id}/"
                agent.load_state_dict({k[len(prefix):]: data[k] for k in data.files if k.startswith(prefix)})
            if "rng_state" in data.files:
                return json.loads(str(data["rng_state"]))
        return None


@dataclass
class StepResult:
    decision: FrameDecision
    outcome: FrameOutcome
    rewards: dict[str, float]
    traces: list[SocfTrace]
    stage1_rounds: int
    round_fraction: np.ndarray
    preferences: dict = field(default_factory=dict)  # the grids handed to deferred acceptance


@dataclass
class _Stage1:
    coalitions: tuple
    states: list[np.ndarray]
    actions: list[np.ndarray]
    logps: list[float]
    fractions: np.ndarray
    traces: list[SocfTrace]
    rounds: int


def _run_stage1(agents, ctx, cfg, inputs, state, assignment, rng, explore, max_assoc) -> _Stage1:
    coalitions = CoalitionPartition.from_association(state.history.prev_association).coalitions
    prev_key = None
    traces = []
    B = cfg.num_ess
    for r in range(max(agents.dmo.stage1_round_cap, 1)):
        ctx.association = CoalitionPartition(coalitions).to_association(cfg.num_sensors)
        ctx.stage1_assignment = assignment
        states, actions, logps = [], [], []
        for b, agent in enumerate(agents.es_agents):
            s = agents.encoder.encode(ctx, str(b))
            a, lp = agent.act(s, rng if explore else None, deterministic=not explore)
            states.append(s)
            actions.append(a)
            logps.append(lp)
        fractions = np.array([float(sigmoid(a[-1])) for a in actions])
        part, trace, _ = socf(
            cfg, inputs.channel, assignment, fractions, state.history, inputs.data, inputs.importance,
            rng=rng, start=coalitions, randomize=(r == 0), max_assoc=max_assoc,
        )
        traces.append(trace)
        coalitions = part.coalitions
        ctx.round_fraction = fractions
        key = (coalitions, tuple(np.round(fractions, 12)), tuple(tuple(np.argsort(-a[:-1], kind="stable")) for a in actions))
        if key == prev_key:
            break
        prev_key = key
    return _Stage1(coalitions, states, actions, logps, fractions, traces, r + 1)


def _finalize(cfg, inputs, state, assignment, coalitions, actions) -> FrameDecision:
    B, N, W = cfg.num_ess, cfg.num_sensors, cfg.num_subcarriers
    es_dt = es_dt_index(assignment)
    y = np.zeros((B, N), dtype=np.int64)
    z = np.zeros((B, N, W), dtype=np.int64)
    granted_all = []
    for b in range(B):
        members = sorted(coalitions[b]) if es_dt[b] >= 0 else []
        zb, granted, _, _ = decode_resource_action(actions[b], members, inputs.channel.gain[:, b, :], 0, W)
        z[b] = zb
        y[b, granted] = 1
        granted_all.append(granted)
    probe = FrameDecision(assignment, y, z, np.zeros(B))
    d_c = collected_data(probe, inputs.data)
    t_star = frame_max_rounds(cfg, assignment, state.history.cumulative_data, d_c, state.t)
    rounds = np.zeros(B)
    for b in range(B):
        rounds[b] = decode_resource_action(actions[b], [], inputs.channel.gain[:, b, :], t_star[b], W)[2]
    return FrameDecision(assignment, y, z, rounds)


def dmo_step(
    agents: DmoAgents,
    cfg: ScenarioConfig,
    inputs: FrameInputs,
    state: EpisodeState,
    rng: np.random.Generator,
    explore: bool = True,
    store: bool = True,
    max_assoc: int | None = None,
    prev_fraction: np.ndarray | None = None,
) -> StepResult:
    t = state.t
    prev_x = state.history.prev_assignment if t > 1 else default_assignment(cfg)
    if prev_fraction is None:
        prev_fraction = np.zeros(cfg.num_ess)
    prev_z = state.prev_decision.subcarriers if state.prev_decision is not None else np.zeros(
        (cfg.num_ess, cfg.num_sensors, cfg.num_subcarriers), dtype=np.int64
    )
    ctx = StageContext(
        importance=inputs.importance,
        prev_collected=state.prev_collected,
        cumulative=state.history.cumulative_data,
        prev_quality=state.prev_quality,
        prev_assignment=np.asarray(state.history.prev_assignment),
        stage1_assignment=prev_x,
        association=np.asarray(state.history.prev_association),
        subcarriers=prev_z,
        round_fraction=prev_fraction,
        prev_round_fraction=prev_fraction,
    )

    if agents.dmo.exhaustive_stage1:
        candidates = {}
        for perm in itertools.permutations(range(cfg.num_ess), cfg.num_partial_dts):
            x = Matching(tuple(perm)).as_assignment(cfg.num_ess)
            sub_ctx = StageContext(**{**ctx.__dict__})
            candidates[perm] = (_run_stage1(agents, sub_ctx, cfg, inputs, state, x, rng, explore, max_assoc), sub_ctx)
        stage1, ctx = candidates[tuple(Matching.from_assignment(prev_x).es_of_dt)]
    else:
        candidates = None
        stage1 = _run_stage1(agents, ctx, cfg, inputs, state, prev_x, rng, explore, max_assoc)

    # Stage 2 observes the Stage-1 partition and resource allocation
    ctx.association = CoalitionPartition(stage1.coalitions).to_association(cfg.num_sensors)
    ctx.subcarriers = _finalize(cfg, inputs, state, prev_x, stage1.coalitions, stage1.actions).subcarriers
    s_c = agents.encoder.encode(ctx, "C")
    s_b = agents.encoder.encode(ctx, "B")
    a_c, lp_c = agents.agent_c.act(s_c, rng if explore else None, deterministic=not explore)
    a_b, lp_b = agents.agent_b.act(s_b, rng if explore else None, deterministic=not explore)
    prefs = decode_preference_action(a_c, a_b, cfg.num_partial_dts, cfg.num_ess)
    matching = gale_shapley(prefs)
    x = matching.as_assignment(cfg.num_ess)
    if candidates is not None:
        stage1 = candidates[matching.es_of_dt][0]

    decision = _finalize(cfg, inputs, state, x, stage1.coalitions, stage1.actions)
    outcome = evaluate_frame(cfg, inputs.channel, decision, state.history, inputs.data, inputs.importance)
    rewards = compute_rewards(cfg, outcome)

    if store:
        for b, agent in enumerate(agents.es_agents):
            _store(agent, stage1.states[b], stage1.actions[b], rewards[str(b)], stage1.logps[b])
        _store(agents.agent_c, s_c, a_c, rewards["C"], lp_c)
        _store(agents.agent_b, s_b, a_b, rewards["B"], lp_b)
    prefs_out = {"dt": prefs.dt_prefs.tolist(), "es": prefs.es_prefs.tolist()}
    return StepResult(decision, outcome, rewards, stage1.traces, stage1.rounds, stage1.fractions, prefs_out)


def _store(agent: PPOAgent, s, a, r, lp) -> None:
    ep = agent.buffer[-1]
    if ep:
        ep[-1].next_state = s
    agent.store(Transition(s, a, r, s, lp))


@dataclass
class TrainResult:
    agents: DmoAgents
    curve: list[float]  # cumulative shaped utility per training episode
    update_stats: list[dict]


def run_dmo_episode(agents, world, frames: int, rng, explore: bool, store: bool, max_assoc=None, on_frame=None):
    """Play one episode; returns the cumulative shaped utility."""
    cfg = world.config
    state = EpisodeState.start(cfg)
    total = 0.0
    fraction = np.zeros(cfg.num_ess)
    for t in range(1, frames + 1):
        inputs = world.inputs(t)
        result = dmo_step(
            agents, cfg, inputs, state, rng, explore=explore, store=store, max_assoc=max_assoc, prev_fraction=fraction
        )
        fraction = result.round_fraction
        errs = check_decision(cfg, result.decision, result.outcome.max_rounds)
        if errs:
            raise AssertionError(f"infeasible decision at t={t}: {errs}")
        total += shaped_utility(cfg, result.outcome)
        if on_frame is not None:
            on_frame(t, result)
        state = state.advance(result.decision, result.outcome)
    if store:
        for agent in agents.all():
            agent.end_episode()
    return total


def dmo_train(
    worlds,
    episodes: int,
    frames: int,
    dmo: DmoConfig | None = None,
    seed: int = 0,
    data_max_bits: float = 600e3,
    agents: DmoAgents | None = None,
    progress=None,
) -> TrainResult:
    """Train on the given worlds, cycling through them in order."""
    dmo = dmo or DmoConfig()
    cfg0 = worlds[0].config
    if agents is None:
        agents = DmoAgents(cfg0, dmo, seed, data_max_bits)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    curve, stats = [], []
    for ep in range(episodes):
        world = worlds[ep % len(worlds)]
        curve.append(run_dmo_episode(agents, world, frames, rng, explore=True, store=True))
        if (ep + 1) % dmo.update_every == 0:
            discount = world.config.discount_eta
            stats.append({a.agent_id: train_on_buffer(a, discount, rng) for a in agents.all()})
        if progress is not None:
            progress(ep, curve[-1])
    return TrainResult(agents, curve, stats)
