"""Comparison schemes: greedy per-frame optimizer, tabular Q-learning, the
centralized framework and the non-overlapping framework."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .coalition import socf
from .model import (
    ChannelState,
    FrameDecision,
    FrameOutcome,
    HistoryState,
    ScenarioConfig,
    best_case_rates,
    collected_data,
    default_assignment,
    es_dt_index,
    evaluate_frame,
    frame_max_rounds,
    integration_terms,
    make_es_valuer,
)
from .sim import EpisodeState, FrameInputs, deadline_penalty, round_half_up, shaped_utility

_HUGE_RATE = 1e30
_TINY_POWER = 1e-30


# ---------------------------------------------------------------- greedy


@dataclass
class _Build:
    members: list[int]
    rounds: int
    utility: float


def _best_rounds(val, data_sum: float, t_limit: float) -> tuple[int, float]:
    """Round count in [0, min(T*, t_limit)] maximising the ES utility (no config term)."""
    if val.dt < 0:
        return 0, val.utility(0.0, 0.0, 0.0, False)
    top = int(max(0, min(val.t_star(data_sum), np.floor(t_limit))))
    cfg = val.config
    ts = np.arange(top + 1, dtype=float)
    g = float(np.log2((val.history_bits + data_sum) / (val.t * cfg.log_norm_beta) + 1.0) ** 2)
    q = np.minimum(cfg.required_quality[val.dt], g * (1.0 - np.exp2(-cfg.round_exponent * ts)))
    u = cfg.gain_weight_xi * val.importance * q - cfg.cost_weight_kappa * val.cre_coef * ts
    i = int(np.argmax(u))
    return i, float(u[i])


def _fixed_latency(cfg, b: int, c: int, history: HistoryState) -> float:
    tau = cfg.model_size_bits[c] / cfg.fiber_rate_es_cloud_bps[b]
    for src in np.nonzero(np.asarray(history.prev_assignment)[c])[0]:
        if src != b:
            tau += history.cumulative_data[c] / cfg.fiber_rate_es_es_bps[src, b]
    return float(tau)


def _greedy_build(cfg, val, b, candidates, data_col, rate_row, budget, fixed_time, capacity) -> _Build:
    """Add sensors one at a time while the ES utility strictly rises."""
    power = cfg.sensor_tx_power_w
    cyc, speed = cfg.cpu_cycles_per_bit_es[b], cfg.cpu_speed_es_hz[b]
    kappa = cfg.cost_weight_kappa

    def score(members):
        data_sum = float(sum(data_col[n] for n in members))
        tx = max((data_col[n] / rate_row[n] for n in members), default=0.0)
        energy = float(sum(power[n] * data_col[n] / rate_row[n] for n in members))
        slack = budget - fixed_time - tx
        t_limit = slack * speed / (cyc * data_sum) if data_sum > 0 else np.inf
        rounds, u = _best_rounds(val, data_sum, max(t_limit, 0.0))
        return rounds, u - kappa * (energy + val.fixed_energy)

    members: list[int] = []
    rounds, best = score(members)
    pool = list(candidates)
    while len(members) < capacity and pool:
        trials = [(score(members + [n]), n) for n in pool]
        (r_new, u_new), n_best = max(trials, key=lambda item: (item[0][1], -item[1]))
        if u_new <= best + 1e-12:
            break
        members.append(n_best)
        pool.remove(n_best)
        rounds, best = r_new, u_new
    return _Build(sorted(members), rounds, best)


def _grant_subcarriers(gains_b: np.ndarray, members, data_col, free: np.ndarray) -> dict[int, int]:
    """Members with more data pick first; each takes its best-gain free subcarrier."""
    out = {}
    for n in sorted(members, key=lambda n: (-data_col[n], n)):
        if not free.any():
            break
        w = int(np.argmax(np.where(free, gains_b[n], -np.inf)))
        free[w] = False
        out[n] = w
    return out


def gre_policy(
    config: ScenarioConfig,
    inputs: FrameInputs,
    history: HistoryState,
    max_assoc: int | None = None,
    fixed_assignment: np.ndarray | None = None,
    shared_subcarriers: bool = False,
) -> FrameDecision:
    """Greedy single-frame maximisation of U(t), ignoring configuration cost.

    Partial-DTs are placed in descending importance; each takes the free ES
    whose greedily built coalition gives the largest ES utility. Sensors are
    then added one at a time while the marginal utility is positive.
    """
    cfg = config
    C, B, N, W = cfg.num_partial_dts, cfg.num_ess, cfg.num_sensors, cfg.num_subcarriers
    limit = cfg.max_assoc_per_sensor if max_assoc is None else max_assoc
    rates = best_case_rates(cfg, inputs.channel)
    eligible = (rates >= cfg.min_rate_bps) & (rates > 0)
    tau_i, _ = integration_terms(cfg, default_assignment(cfg))
    budget = cfg.frame_deadline_s - tau_i
    counts = np.zeros(N, dtype=np.int64)
    x = np.zeros((C, B), dtype=np.int64)
    y = np.zeros((B, N), dtype=np.int64)
    z = np.zeros((B, N, W), dtype=np.int64)
    rounds = np.zeros(B)
    shared_free = np.ones(W, dtype=bool)
    taken = np.zeros(B, dtype=bool)

    order = sorted(range(C), key=lambda c: (-inputs.importance[c], c))
    for c in order:
        options = [fixed_assignment[c].argmax()] if fixed_assignment is not None else np.nonzero(~taken)[0]
        best = None
        for b in options:
            b = int(b)
            xb = np.zeros((C, B), dtype=np.int64)
            xb[c, b] = 1
            val = make_es_valuer(cfg, b, xb, history, inputs.importance)
            capacity = int(shared_free.sum()) if shared_subcarriers else W
            cands = [n for n in range(N) if eligible[b, n] and counts[n] < limit]
            build = _greedy_build(
                cfg, val, b, cands, inputs.data[:, c], rates[b], budget, _fixed_latency(cfg, b, c, history), capacity
            )
            if best is None or build.utility > best[1].utility + 1e-12:
                best = (b, build)
        b, build = best
        taken[b] = True
        x[c, b] = 1
        free = shared_free if shared_subcarriers else np.ones(W, dtype=bool)
        grants = _grant_subcarriers(inputs.channel.gain[:, b, :], build.members, inputs.data[:, c], free)
        for n, w in grants.items():
            y[b, n] = 1
            z[b, n, w] = 1
            counts[n] += 1
        rounds[b] = build.rounds

    # rounds were chosen for the planned data; re-cap against T* of the realised decision
    d_c = collected_data(FrameDecision(x, y, z, rounds), inputs.data)
    t_star = frame_max_rounds(cfg, x, history.cumulative_data, d_c, history.frame_index)
    rounds = np.minimum(rounds, t_star)
    return FrameDecision(x, y, z, rounds)


# ---------------------------------------------------------------- frameworks


def non_overlap_restrict(config, channel, assignment, round_fraction, history, data, importance, rng=None, **kw):
    """Coalition formation with every sensor limited to a single ES."""
    return socf(config, channel, assignment, round_fraction, history, data, importance, rng=rng, max_assoc=1, **kw)


def centra_view(config: ScenarioConfig, channel: ChannelState) -> tuple[ScenarioConfig, ChannelState]:
    """The centralized framework expressed as one virtual creation site per partial-DT.

    All sites sit at the cloud: they share its CPU (each gets F_CS / |C| with
    the capacitance scaled so per-round energy matches a full-speed cloud
    round), hear sensors through the cloud's channel gains and noise, and
    never migrate or upload (fiber links are effectively free).
    """
    C = config.num_partial_dts
    share = config.cpu_speed_cloud_hz / C
    view = config.with_updates(
        num_ess=C,
        max_assoc_per_sensor=1,
        es_tx_power_w=_TINY_POWER,
        noise_power_w=config.cloud_noise_power_w,
        fiber_rate_es_cloud_bps=_HUGE_RATE,
        fiber_rate_cloud_es_bps=_HUGE_RATE,
        fiber_rate_es_es_bps=_HUGE_RATE,
        cpu_cycles_per_bit_es=config.cpu_cycles_per_bit_cloud,
        cpu_speed_es_hz=share,
        switched_capacitance=config.cloud_switched_capacitance * C * C,
        es_positions=np.zeros((C, 2)),
    )
    n, w = config.num_sensors, config.num_subcarriers
    cloud = channel.cloud_gain if channel.cloud_gain is not None else channel.gain.mean(axis=1)
    gain = np.broadcast_to(np.asarray(cloud)[:, None, :], (n, C, w)).copy()
    return view, ChannelState(gain, channel.frame_index, cloud)


def centra_history(config: ScenarioConfig, history: HistoryState) -> HistoryState:
    """History in the cloud view: DT c always lives on virtual site c."""
    C = config.num_partial_dts
    prev_y = np.asarray(history.prev_association)
    if prev_y.shape[0] != C:
        prev_y = np.zeros((C, config.num_sensors), dtype=np.int64)
    x = np.eye(C, dtype=np.int64) if history.frame_index > 1 else np.zeros((C, C), dtype=np.int64)
    return HistoryState(history.cumulative_data, x, prev_y, history.frame_index)


def centra_decision(config: ScenarioConfig, inputs: FrameInputs, history: HistoryState) -> FrameDecision:
    """Greedy decision for the cloud view (`config`, `history` already in view form)."""
    fixed = np.eye(config.num_partial_dts, dtype=np.int64)
    return gre_policy(config, inputs, history, max_assoc=1, fixed_assignment=fixed, shared_subcarriers=True)


def centra_simulate(
    config: ScenarioConfig, inputs: FrameInputs, history: HistoryState
) -> tuple[FrameDecision, FrameOutcome, HistoryState]:
    """One frame of the centralized framework.

    Returns the decision and outcome in the cloud view plus the history in
    view form (feed it back as `history` for the next frame).
    """
    view, channel = centra_view(config, inputs.channel)
    vhist = centra_history(config, history)
    vinputs = FrameInputs(channel, inputs.data, inputs.importance)
    decision = centra_decision(view, vinputs, vhist)
    outcome = evaluate_frame(view, channel, decision, vhist, inputs.data, inputs.importance)
    return decision, outcome, vhist


# ---------------------------------------------------------------- tabular Q


@dataclass
class TabularQ:
    num_actions: int
    alpha: float = 0.1
    discount: float = 0.92
    epsilon: float = 0.1
    table: dict = field(default_factory=dict)

    def values(self, key) -> np.ndarray:
        q = self.table.get(key)
        if q is None:
            q = np.zeros(self.num_actions)
            self.table[key] = q
        return q

    def greedy(self, key, rng: np.random.Generator) -> int:
        q = self.table.get(key)
        if q is None:
            return int(rng.integers(self.num_actions))
        best = np.flatnonzero(q == q.max())
        return int(best[0]) if len(best) == 1 else int(rng.choice(best))

    def select(self, key, rng: np.random.Generator, explore: bool = True) -> int:
        if explore and rng.random() < self.epsilon:
            return int(rng.integers(self.num_actions))
        return self.greedy(key, rng)

    def update(self, key, action: int, reward: float, next_key) -> None:
        q = self.values(key)
        target = reward + self.discount * float(self.values(next_key).max())
        q[action] += self.alpha * (target - q[action])


ROUND_BUCKETS = (0.5, 0.75, 1.0)
ASSOC_TEMPLATES = (1, 3, 6)  # strongest-k sensors per ES


def q_action_space(config: ScenarioConfig) -> list[tuple[tuple[int, ...], float, int]]:
    perms = list(itertools.permutations(range(config.num_ess), config.num_partial_dts))
    return [(p, r, k) for p in perms for r in ROUND_BUCKETS for k in ASSOC_TEMPLATES]


def q_state_key(config: ScenarioConfig, inputs: FrameInputs, state: EpisodeState) -> tuple:
    """(most important DT, coalition-size histogram, previous deadline slack bucket)."""
    top = int(np.argmax(inputs.importance))
    sizes = np.asarray(state.history.prev_association).sum(axis=1)
    hist = (int((sizes == 0).sum()), int(((sizes > 0) & (sizes <= 3)).sum()), int((sizes > 3).sum()))
    if state.prev_outcome is None:
        slack = 2
    else:
        gap = config.frame_deadline_s - state.prev_outcome.total_latency
        slack = 0 if gap < 0 else (1 if gap < 2.0 else 2)
    return (top, hist, slack)


def q_decode(config: ScenarioConfig, inputs: FrameInputs, history: HistoryState, action) -> FrameDecision:
    perm, bucket, k = action
    C, B, N, W = config.num_partial_dts, config.num_ess, config.num_sensors, config.num_subcarriers
    x = np.zeros((C, B), dtype=np.int64)
    x[np.arange(C), list(perm)] = 1
    es_dt = es_dt_index(x)
    rates = best_case_rates(config, inputs.channel)
    eligible = (rates >= config.min_rate_bps) & (rates > 0)
    counts = np.zeros(N, dtype=np.int64)
    y = np.zeros((B, N), dtype=np.int64)
    z = np.zeros((B, N, W), dtype=np.int64)
    for b in range(B):
        if es_dt[b] < 0:
            continue
        ranked = sorted((n for n in range(N) if eligible[b, n]), key=lambda n: (-rates[b, n], n))
        chosen = [n for n in ranked if counts[n] < config.max_assoc_per_sensor][: min(k, W)]
        grants = _grant_subcarriers(inputs.channel.gain[:, b, :], chosen, inputs.data[:, es_dt[b]], np.ones(W, bool))
        for n, w in grants.items():
            y[b, n] = 1
            z[b, n, w] = 1
            counts[n] += 1
    d_c = collected_data(FrameDecision(x, y, z, np.zeros(B)), inputs.data)
    t_star = frame_max_rounds(config, x, history.cumulative_data, d_c, history.frame_index)
    rounds = np.array([min(round_half_up(bucket * t_star[b]), t_star[b]) for b in range(B)])
    return FrameDecision(x, y, z, rounds)


def q_reward(config: ScenarioConfig, outcome: FrameOutcome) -> float:
    base = float(outcome.es_utilities.sum()) if outcome.deadline_met else 0.0
    return base - deadline_penalty(config, outcome)


def tabular_q_policy(
    q: TabularQ, actions, config: ScenarioConfig, inputs: FrameInputs, state: EpisodeState, rng, explore: bool = True
) -> tuple[FrameDecision, int, tuple]:
    key = q_state_key(config, inputs, state)
    a = q.select(key, rng, explore=explore)
    return q_decode(config, inputs, state.history, actions[a]), a, key


def run_q_episode(q: TabularQ, actions, world, frames: int, rng, explore: bool, learn: bool, on_frame=None) -> float:
    """One episode of tabular Q-learning; returns the cumulative shaped utility."""
    cfg = world.config
    state = EpisodeState.start(cfg)
    total = 0.0
    for t in range(1, frames + 1):
        inputs = world.inputs(t)
        decision, a, key = tabular_q_policy(q, actions, cfg, inputs, state, rng, explore=explore)
        outcome = evaluate_frame(cfg, inputs.channel, decision, state.history, inputs.data, inputs.importance)
        state = state.advance(decision, outcome)
        if learn:
            next_key = q_state_key(cfg, world.inputs(t + 1), state) if t < frames else key
            q.update(key, a, q_reward(cfg, outcome), next_key)
        total += shaped_utility(cfg, outcome)
        if on_frame is not None:
            on_frame(t, decision, outcome)
    return total


def train_tabular_q(worlds, episodes: int, frames: int, seed: int = 0, **q_kwargs) -> tuple[TabularQ, list[float]]:
    """Epsilon-greedy Q-learning cycling through the training worlds."""
    actions = q_action_space(worlds[0].config)
    q = TabularQ(len(actions), **q_kwargs)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    curve = [run_q_episode(q, actions, worlds[e % len(worlds)], frames, rng, True, True) for e in range(episodes)]
    return q, curve
