"""Overlapping ES-sensor coalition formation with Transfer / Join / Quit switch rules.

Coalition values use a rate table that is fixed for the whole call: every
member is assumed to hold one dedicated subcarrier of its best gain, with no
co-channel interference. That keeps each ES utility a function of its own
member set only, which is what makes the sum of ES utilities an exact
potential for the switch dynamics.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .model import (
    ChannelState,
    FrameDecision,
    HistoryState,
    ScenarioConfig,
    best_case_rates,
    es_dt_index,
    evaluate_frame,
    make_es_valuer,
)

STRICT_TOL = 1e-9  # minimum gain for a Transfer or Join to count as an improvement
EQ_TOL = 1e-12  # slack for "no member loses" comparisons


class NonConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class CoalitionPartition:
    coalitions: tuple[frozenset, ...]  # Co_b per ES

    def memberships(self, n: int) -> list[int]:
        return [b for b, co in enumerate(self.coalitions) if n in co]

    def to_association(self, num_sensors: int) -> np.ndarray:
        y = np.zeros((len(self.coalitions), num_sensors), dtype=np.int64)
        for b, co in enumerate(self.coalitions):
            y[b, sorted(co)] = 1
        return y

    @classmethod
    def from_association(cls, y) -> "CoalitionPartition":
        y = np.asarray(y)
        return cls(tuple(frozenset(np.nonzero(row)[0].tolist()) for row in y))


@dataclass
class SwitchOp:
    kind: str  # "transfer" | "join" | "quit"
    sensor: int
    source: int | None
    target: int | None
    delta_un: float
    zeta_before: float
    zeta_after: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SocfTrace:
    initial: list[list[int]]
    forced_quits: list[tuple[int, int]] = field(default_factory=list)
    ops: list[SwitchOp] = field(default_factory=list)
    passes: int = 0
    zeta: list[float] = field(default_factory=list)  # after init, then after every op
    snapshots: list[list[list[int]]] = field(default_factory=list)  # partition before each op
    assignment: list[list[int]] | None = None
    round_fraction: list[float] | None = None
    max_assoc: int | None = None

    def counts(self) -> dict[str, int]:
        out = {"transfer": 0, "join": 0, "quit": 0}
        for op in self.ops:
            out[op.kind] += 1
        return out


class CoalitionGame:
    """Everything SOCF needs to value coalitions in one frame."""

    def __init__(
        self,
        config: ScenarioConfig,
        channel: ChannelState,
        assignment,
        round_fraction,
        history: HistoryState,
        per_sensor_data,
        importance,
        max_assoc: int | None = None,
    ):
        self.config = config
        self.channel = channel
        self.assignment = np.asarray(assignment, dtype=np.int64)
        self.history = history
        self.data = np.asarray(per_sensor_data, dtype=float)
        self.importance = np.asarray(importance, dtype=float)
        self.fraction = np.clip(np.asarray(round_fraction, dtype=float), 0.0, 1.0)
        self.max_assoc = config.max_assoc_per_sensor if max_assoc is None else int(max_assoc)
        self.capacity = config.num_subcarriers
        B, N = config.num_ess, config.num_sensors
        self.rates = best_case_rates(config, channel)
        self.es_dt = es_dt_index(self.assignment)
        self.valuers = [make_es_valuer(config, b, self.assignment, history, self.importance) for b in range(B)]
        self.member_data = np.zeros((B, N))
        self.member_energy = np.zeros((B, N))
        for b, c in enumerate(self.es_dt):
            if c >= 0:
                self.member_data[b] = self.data[:, c]
                with np.errstate(divide="ignore"):
                    self.member_energy[b] = np.where(
                        self.rates[b] > 0, config.sensor_tx_power_w * self.data[:, c] / self.rates[b], np.inf
                    )
        self.eligible = (self.rates >= config.min_rate_bps) & (self.rates > 0) & (self.es_dt >= 0)[:, None]
        self._cache: dict[tuple[int, frozenset], float] = {}

    def rounds(self, b: int, members: frozenset) -> float:
        v = self.valuers[b]
        return self.fraction[b] * v.t_star(float(sum(self.member_data[b, n] for n in members)))

    def es_utility(self, b: int, members: frozenset) -> float:
        key = (b, members)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        v = self.valuers[b]
        ids = sorted(members)
        data_sum = float(self.member_data[b, ids].sum()) if ids else 0.0
        energy = float(self.member_energy[b, ids].sum()) if ids else 0.0
        rounds = self.fraction[b] * v.t_star(data_sum)
        val = v.utility(data_sum, energy, rounds, members != v.prev_members)
        self._cache[key] = val
        return val

    def contribution(self, b: int, n: int, members: frozenset) -> float:
        """U_b(members) - U_b(members without n); n must be in members."""
        return self.es_utility(b, members) - self.es_utility(b, members - {n})

    def potential(self, coalitions) -> float:
        return float(sum(self.es_utility(b, frozenset(co)) for b, co in enumerate(coalitions)))

    def decision_for(self, coalitions) -> FrameDecision:
        """A FrameDecision realising the partition with one subcarrier per member."""
        cfg = self.config
        B, N, W = cfg.num_ess, cfg.num_sensors, cfg.num_subcarriers
        y = np.zeros((B, N), dtype=np.int64)
        z = np.zeros((B, N, W), dtype=np.int64)
        rounds = np.zeros(B)
        for b, co in enumerate(coalitions):
            for w, n in enumerate(sorted(co)):
                y[b, n] = 1
                z[b, n, w] = 1
            rounds[b] = self.rounds(b, frozenset(co))
        return FrameDecision(self.assignment.copy(), y, z, rounds)

    def evaluated_potential(self, coalitions) -> float:
        """Sum of ES utilities computed through the full frame evaluation."""
        decision = self.decision_for(coalitions)
        out = evaluate_frame(
            self.config, self.channel, decision, self.history, self.data, self.importance, rates=self.rates
        )
        return float(out.es_utilities.sum())


def eligible_sensors(config: ScenarioConfig, channel: ChannelState, assignment, b: int) -> set[int]:
    """Sensors whose best single-subcarrier rate toward ES b clears the minimum rate."""
    if es_dt_index(assignment)[b] < 0:
        return set()
    r = best_case_rates(config, channel)[b]
    return set(np.nonzero((r >= config.min_rate_bps) & (r > 0))[0].tolist())


def _others_unchanged(game: CoalitionGame, coalitions, n: int, skip: set[int]) -> bool:
    # members of n's other coalitions keep their contributions since those sets are untouched
    for e, co in enumerate(coalitions):
        if e in skip or n not in co:
            continue
        for m in co:
            before = game.contribution(e, m, co)
            after = game.contribution(e, m, co)
            if after < before - EQ_TOL:
                return False
    return True


def _no_member_loses(game: CoalitionGame, b: int, old: frozenset, new: frozenset) -> bool:
    for m in old & new:
        if game.contribution(b, m, new) < game.contribution(b, m, old) - EQ_TOL:
            return False
    return True


def can_transfer(game: CoalitionGame, coalitions, n: int, a: int, b: int) -> tuple[bool, dict]:
    co_a, co_b = coalitions[a], coalitions[b]
    audit = {"kind": "transfer", "sensor": n, "source": a, "target": b}
    if n not in co_a or n in co_b:
        return False, audit
    if len(co_b) >= game.capacity or not game.eligible[b, n]:
        return False, audit
    joined = co_b | {n}
    gain_new = game.contribution(b, n, joined)
    gain_old = game.contribution(a, n, co_a)
    audit.update(u_new=gain_new, u_old=gain_old, delta_un=gain_new - gain_old)
    if not gain_new > max(0.0, gain_old) + STRICT_TOL:
        return False, audit
    if not _no_member_loses(game, b, co_b, joined):
        return False, audit
    if not _others_unchanged(game, coalitions, n, {a, b}):
        return False, audit
    return True, audit


def can_join(game: CoalitionGame, coalitions, n: int, b: int) -> tuple[bool, dict]:
    co_b = coalitions[b]
    audit = {"kind": "join", "sensor": n, "source": None, "target": b}
    if n in co_b:
        return False, audit
    count = sum(1 for co in coalitions if n in co)
    if count >= game.max_assoc or len(co_b) >= game.capacity or not game.eligible[b, n]:
        return False, audit
    joined = co_b | {n}
    gain_new = game.contribution(b, n, joined)
    audit.update(u_new=gain_new, delta_un=gain_new)
    if not gain_new > STRICT_TOL:
        return False, audit
    if not _no_member_loses(game, b, co_b, joined):
        return False, audit
    if not _others_unchanged(game, coalitions, n, {b}):
        return False, audit
    return True, audit


def can_quit(game: CoalitionGame, coalitions, n: int, a: int) -> tuple[bool, dict]:
    co_a = coalitions[a]
    audit = {"kind": "quit", "sensor": n, "source": a, "target": None}
    if n not in co_a:
        return False, audit
    gain_old = game.contribution(a, n, co_a)
    audit.update(u_old=gain_old, delta_un=-gain_old)
    if gain_old > 0.0:
        return False, audit
    if not _no_member_loses(game, a, co_a, co_a - {n}):
        return False, audit
    return True, audit


def potential(game: CoalitionGame, partition: CoalitionPartition) -> float:
    """Sum of ES utilities, computed through the frame evaluation."""
    return game.evaluated_potential(partition.coalitions)


def admissible_ops(game: CoalitionGame, coalitions) -> list[dict]:
    """Every admissible switch of every sensor; empty for a switch-stable partition."""
    B = game.config.num_ess
    found = []
    for n in range(game.config.num_sensors):
        for a in range(B):
            if n in coalitions[a]:
                ok, audit = can_quit(game, coalitions, n, a)
                if ok:
                    found.append(audit)
                for b in range(B):
                    if n not in coalitions[b]:
                        ok, audit = can_transfer(game, coalitions, n, a, b)
                        if ok:
                            found.append(audit)
        for b in range(B):
            ok, audit = can_join(game, coalitions, n, b)
            if ok:
                found.append(audit)
    return found


def _initial_partition(game: CoalitionGame, start, rng, randomize: bool, trace: SocfTrace) -> list[frozenset]:
    cfg = game.config
    B, N = cfg.num_ess, cfg.num_sensors
    coalitions = [frozenset(co) for co in start]
    # force out members that are no longer eligible (channel worsened or ES lost its DT)
    for b in range(B):
        for n in sorted(coalitions[b]):
            if not game.eligible[b, n]:
                coalitions[b] = coalitions[b] - {n}
                trace.forced_quits.append((n, b))
    # respect the caps if the starting point came from a looser regime
    counts = np.zeros(N, dtype=np.int64)
    for b in range(B):
        keep = []
        for n in sorted(coalitions[b]):
            if counts[n] < game.max_assoc and len(keep) < game.capacity:
                keep.append(n)
                counts[n] += 1
            else:
                trace.forced_quits.append((n, b))
        coalitions[b] = frozenset(keep)
    if randomize and rng is not None:
        for b in range(B):
            if game.es_dt[b] < 0:
                continue
            room = max(game.capacity - len(coalitions[b]), 0)
            pool = [n for n in range(N) if game.eligible[b, n] and n not in coalitions[b] and counts[n] < game.max_assoc]
            if room == 0 or not pool:
                continue
            k = int(rng.integers(0, min(room, len(pool)) + 1))
            picked = rng.choice(len(pool), size=k, replace=False) if k else []
            for i in sorted(int(i) for i in picked):
                coalitions[b] = coalitions[b] | {pool[i]}
                counts[pool[i]] += 1
    return coalitions


def run_socf(
    game: CoalitionGame,
    start=None,
    rng: np.random.Generator | None = None,
    randomize: bool = True,
    safety_bound: int | None = None,
) -> tuple[CoalitionPartition, SocfTrace]:
    """Switch dynamics until a full pass over the sensors applies nothing."""
    cfg = game.config
    B, N = cfg.num_ess, cfg.num_sensors
    if start is None:
        start = CoalitionPartition.from_association(game.history.prev_association).coalitions
    trace = SocfTrace(initial=[])
    coalitions = _initial_partition(game, start, rng, randomize, trace)
    trace.initial = [sorted(co) for co in coalitions]
    zeta = game.potential(coalitions)
    trace.zeta.append(zeta)
    bound = safety_bound if safety_bound is not None else 10 * N * B

    while True:
        if trace.passes >= bound:
            raise NonConvergence(f"no stable partition after {bound} passes")
        trace.passes += 1
        applied = 0
        for n in range(N):
            op = _first_admissible(game, coalitions, n)
            if op is None:
                continue
            kind, a, b = op
            trace.snapshots.append([sorted(co) for co in coalitions])
            if a is not None:
                coalitions[a] = coalitions[a] - {n}
            if b is not None:
                coalitions[b] = coalitions[b] | {n}
            new_zeta = game.potential(coalitions)
            trace.ops.append(SwitchOp(kind, n, a, b, float(op_delta(game, kind, n, a, b, coalitions)), zeta, new_zeta))
            trace.zeta.append(new_zeta)
            zeta = new_zeta
            applied += 1
        if applied == 0:
            break
    return CoalitionPartition(tuple(coalitions)), trace


def op_delta(game: CoalitionGame, kind: str, n: int, a, b, after) -> float:
    """Utility change of the moving sensor, given the partition after the move."""
    if kind == "join":
        return game.contribution(b, n, after[b])
    if kind == "quit":
        return -game.contribution(a, n, after[a] | {n})
    return game.contribution(b, n, after[b]) - game.contribution(a, n, after[a] | {n})


def _first_admissible(game: CoalitionGame, coalitions, n: int):
    B = game.config.num_ess
    sources = [a for a in range(B) if n in coalitions[a]]
    targets = [b for b in range(B) if n not in coalitions[b] and game.es_dt[b] >= 0]
    if not sources:
        for b in targets:
            if can_join(game, coalitions, n, b)[0]:
                return "join", None, b
        return None
    for a in sources:
        for b in targets:
            if can_transfer(game, coalitions, n, a, b)[0]:
                return "transfer", a, b
            if can_join(game, coalitions, n, b)[0]:
                return "join", None, b
            if can_quit(game, coalitions, n, a)[0]:
                return "quit", a, None
        if not targets and can_quit(game, coalitions, n, a)[0]:
            return "quit", a, None
    return None


def socf(
    config: ScenarioConfig,
    channel: ChannelState,
    assignment,
    round_fraction,
    history: HistoryState,
    per_sensor_data,
    importance,
    rng: np.random.Generator | None = None,
    start=None,
    randomize: bool = True,
    max_assoc: int | None = None,
) -> tuple[CoalitionPartition, SocfTrace, CoalitionGame]:
    game = CoalitionGame(config, channel, assignment, round_fraction, history, per_sensor_data, importance, max_assoc)
    partition, trace = run_socf(game, start=start, rng=rng, randomize=randomize)
    trace.assignment = game.assignment.tolist()
    trace.round_fraction = game.fraction.tolist()
    trace.max_assoc = game.max_assoc
    return partition, trace, game
