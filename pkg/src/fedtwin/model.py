"""Domain types and closed-form formulas of the federated DT construction model.

All data volumes are in bits, times in seconds, energies in joules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

GAIN_LEVELS = (0.2, 0.4, 0.6)


class ConfigError(ValueError):
    pass


class InfeasibleDecision(ValueError):
    pass


class NotAMember(ValueError):
    pass


class DegenerateParameters(ValueError):
    pass


# field name -> shape spec; entries are "C", "B", "N", ("B", "B") or ("B", 2) ...
_ARRAY_SHAPES = {
    "required_quality": ("C",),
    "model_size_bits": ("C",),
    "cloud_instr_per_dt": ("C",),
    "sensor_tx_power_w": ("N",),
    "es_tx_power_w": ("B",),
    "noise_power_w": ("B",),
    "fiber_rate_es_cloud_bps": ("B",),
    "fiber_rate_cloud_es_bps": ("B",),
    "fiber_rate_es_es_bps": ("B", "B"),
    "cpu_cycles_per_bit_es": ("B",),
    "cpu_speed_es_hz": ("B",),
    "switched_capacitance": ("B",),
    "es_positions": ("B", 2),
    "sensor_positions": ("N", 2),
}


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """One concrete world. Scalars passed for per-device fields are broadcast."""

    num_partial_dts: int = 5
    num_ess: int = 5
    num_sensors: int = 20
    num_subcarriers: int = 10
    subcarrier_bandwidth_hz: float = 3e6
    max_assoc_per_sensor: int = 3
    lipschitz_L: float = 8.0
    learning_rate_delta: float = 0.02
    strong_convexity_gamma: float = 2.0
    log_norm_beta: float = 200e3
    required_quality: np.ndarray = 0.9
    model_size_bits: np.ndarray = 3e6
    sensor_tx_power_w: np.ndarray = 0.1
    es_tx_power_w: np.ndarray = 0.1
    noise_power_w: np.ndarray = 1.2e-7
    fiber_rate_es_cloud_bps: np.ndarray = 2e6
    fiber_rate_cloud_es_bps: np.ndarray = 2e6
    fiber_rate_es_es_bps: np.ndarray = 2e6
    min_rate_bps: float = 3e3
    cpu_cycles_per_bit_es: np.ndarray = 15.0
    cpu_speed_es_hz: np.ndarray = 64e6
    switched_capacitance: np.ndarray = 1e-20
    cpu_cycles_per_bit_cloud: float = 15.0
    cpu_speed_cloud_hz: float = 3e9
    cloud_access_rate: float = 1e-3
    cloud_instr_per_dt: np.ndarray = 100.0
    cloud_power_max_w: float = 30.0
    cloud_power_idle_w: float = 10.0
    cloud_power_leak_w: float = 5.0
    gain_weight_xi: float = 10.0
    cost_weight_kappa: float = 0.1
    config_cost: float = 1.0
    frame_deadline_s: float = 7.6
    discount_eta: float = 0.92
    penalty_psi: float = 10.0
    es_positions: np.ndarray = None
    sensor_positions: np.ndarray = None
    area_side_m: float = 1000.0
    t_max_clamp: int = 200
    cloud_noise_power_w: float = 1.2e-7
    cloud_switched_capacitance: float = 1e-20

    def __post_init__(self):
        dims = {"C": self.num_partial_dts, "B": self.num_ess, "N": self.num_sensors}
        for name, spec in _ARRAY_SHAPES.items():
            shape = tuple(dims[s] if isinstance(s, str) else s for s in spec)
            value = getattr(self, name)
            if value is None:
                value = 0.0
            arr = np.array(np.broadcast_to(np.asarray(value, dtype=float), shape))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self._validate()

    def _validate(self):
        counts = ("num_partial_dts", "num_ess", "num_sensors", "num_subcarriers", "max_assoc_per_sensor")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_ess < self.num_partial_dts:
            raise ConfigError("num_ess must be >= num_partial_dts")
        if not 0.0 < self.learning_rate_delta < 2.0 / self.lipschitz_L:
            raise ConfigError("learning_rate_delta must lie in (0, 2/L)")
        rq = self.required_quality
        if np.any(rq <= 0) or np.any(rq > 1):
            raise ConfigError("required_quality must lie in (0, 1]")
        positive = [
            "subcarrier_bandwidth_hz", "lipschitz_L", "strong_convexity_gamma", "log_norm_beta",
            "model_size_bits", "sensor_tx_power_w", "es_tx_power_w", "noise_power_w",
            "fiber_rate_es_cloud_bps", "fiber_rate_cloud_es_bps", "fiber_rate_es_es_bps",
            "cpu_cycles_per_bit_es", "cpu_speed_es_hz", "switched_capacitance",
            "cpu_cycles_per_bit_cloud", "cpu_speed_cloud_hz", "cloud_access_rate", "cloud_instr_per_dt",
            "cloud_power_max_w", "cloud_power_idle_w", "cloud_power_leak_w", "frame_deadline_s",
            "cloud_noise_power_w", "cloud_switched_capacitance", "area_side_m", "t_max_clamp",
        ]
        for name in positive:
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ConfigError(f"{name} must be strictly positive")
        if self.min_rate_bps < 0:
            raise ConfigError("min_rate_bps must be non-negative")
        if not 0.0 <= self.discount_eta <= 1.0:
            raise ConfigError("discount_eta must lie in [0, 1]")

    @property
    def round_exponent(self) -> float:
        """k such that one more round multiplies the residual quality gap by 2**-k."""
        k = (2.0 - self.lipschitz_L * self.learning_rate_delta) * self.learning_rate_delta
        return k * self.strong_convexity_gamma / 2.0

    def with_updates(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


@dataclass(frozen=True, eq=False)
class ChannelState:
    gain: np.ndarray  # (N, B, W)
    frame_index: int
    cloud_gain: np.ndarray | None = None  # (N, W), used by the centralized framework


@dataclass(frozen=True, eq=False)
class FrameDecision:
    assignment: np.ndarray  # x (C, B)
    association: np.ndarray  # y (B, N)
    subcarriers: np.ndarray  # z (B, N, W)
    training_rounds: np.ndarray  # T_b (B,)

    @classmethod
    def empty(cls, config: ScenarioConfig, assignment=None) -> "FrameDecision":
        C, B, N, W = config.num_partial_dts, config.num_ess, config.num_sensors, config.num_subcarriers
        if assignment is None:
            assignment = default_assignment(config)
        return cls(
            np.asarray(assignment, dtype=np.int64),
            np.zeros((B, N), dtype=np.int64),
            np.zeros((B, N, W), dtype=np.int64),
            np.zeros(B, dtype=float),
        )


@dataclass(frozen=True, eq=False)
class HistoryState:
    """State carried into frame t.

    cumulative_data holds the per-DT data collected in frames 1..t-1; the
    current frame's data is added on top when quality is evaluated.
    """

    cumulative_data: np.ndarray  # (C,)
    prev_assignment: np.ndarray  # (C, B)
    prev_association: np.ndarray  # (B, N)
    frame_index: int = 1

    @classmethod
    def initial(cls, config: ScenarioConfig) -> "HistoryState":
        C, B, N = config.num_partial_dts, config.num_ess, config.num_sensors
        return cls(np.zeros(C), np.zeros((C, B), dtype=np.int64), np.zeros((B, N), dtype=np.int64), 1)

    def advance(self, decision: FrameDecision, outcome: "FrameOutcome") -> "HistoryState":
        return HistoryState(
            self.cumulative_data + outcome.collected_data,
            np.array(decision.assignment, dtype=np.int64),
            np.array(decision.association, dtype=np.int64),
            self.frame_index + 1,
        )


@dataclass(frozen=True, eq=False)
class FrameOutcome:
    per_dt_quality: np.ndarray  # A_{c, Phi(c)} (C,)
    global_quality: float
    collected_data: np.ndarray  # d_c(t) (C,)
    rates: np.ndarray  # (B, N)
    max_rounds: np.ndarray  # T*_b (B,)
    tau_dtr: np.ndarray
    tau_back: np.ndarray
    tau_cre: np.ndarray
    tau_mtr: np.ndarray
    tau_integration: float
    total_latency: float
    e_dtr: np.ndarray
    e_back: np.ndarray
    e_cre: np.ndarray
    e_mtr: np.ndarray
    e_integration: float
    total_energy: float
    frame_utility: float
    cloud_utility: float
    es_utilities: np.ndarray
    config_changes: int
    es_changed: np.ndarray  # F_b (B,)
    deadline_met: bool

    @property
    def es_latency(self) -> np.ndarray:
        return self.tau_dtr + self.tau_back + self.tau_cre + self.tau_mtr

    @property
    def es_energy(self) -> np.ndarray:
        return self.e_dtr + self.e_back + self.e_cre + self.e_mtr


def default_assignment(config: ScenarioConfig) -> np.ndarray:
    """DT c on ES c. Used where no previous assignment exists."""
    x = np.zeros((config.num_partial_dts, config.num_ess), dtype=np.int64)
    x[np.arange(config.num_partial_dts), np.arange(config.num_partial_dts)] = 1
    return x


def es_dt_index(assignment: np.ndarray) -> np.ndarray:
    """Per ES, the index of its partial-DT or -1."""
    x = np.asarray(assignment)
    out = np.full(x.shape[1], -1, dtype=np.int64)
    cs, bs = np.nonzero(x)
    out[bs] = cs
    return out


def gamma_factor(cumulative_bits, t: int, beta: float):
    """(log2(x / (t beta) + 1))^2."""
    return np.log2(np.asarray(cumulative_bits, dtype=float) / (t * beta) + 1.0) ** 2


def partial_dt_quality(config: ScenarioConfig, dt: int, cumulative_data, t: int, rounds):
    g = gamma_factor(cumulative_data, t, config.log_norm_beta)
    q = g * (1.0 - np.exp2(-config.round_exponent * np.asarray(rounds, dtype=float)))
    return np.minimum(config.required_quality[dt], q)


def rounds_to_cap(required: float, gamma_value: float, k: float, clamp: int) -> int:
    """Smallest integer T with gamma * (1 - 2^-kT) >= required, or clamp if unreachable."""
    if k == 0.0:
        raise DegenerateParameters("L * delta == 2 makes the round exponent vanish")
    if gamma_value <= required:
        return int(clamp)
    x = -math.log2(1.0 - required / gamma_value) / k
    rounds = max(math.ceil(x - 1e-9), 0)
    # settle floating-point edge cases against the quality expression itself
    while rounds > 0 and gamma_value * (1.0 - 2.0 ** (-k * (rounds - 1))) >= required:
        rounds -= 1
    while gamma_value * (1.0 - 2.0 ** (-k * rounds)) < required:
        rounds += 1
    return rounds


def max_training_rounds(config: ScenarioConfig, cumulative_data: float, t: int, dt: int | None) -> int:
    """T* for an ES holding partial-DT `dt` (None for an unassigned ES)."""
    if dt is None or dt < 0:
        return 0
    if t < 1:
        raise ValueError("frame index starts at 1")
    g = float(gamma_factor(cumulative_data, t, config.log_norm_beta))
    return rounds_to_cap(float(config.required_quality[dt]), g, config.round_exponent, config.t_max_clamp)


def best_case_rates(config: ScenarioConfig, channel: ChannelState) -> np.ndarray:
    """(B, N) rate of each sensor on its best subcarrier with no interference."""
    best = channel.gain.max(axis=2).T  # (B, N)
    snr = config.sensor_tx_power_w[None, :] * best / config.noise_power_w[:, None]
    return config.subcarrier_bandwidth_hz * np.log2(1.0 + snr)


def transmission_rates(config: ScenarioConfig, channel: ChannelState, decision: FrameDecision) -> np.ndarray:
    """(B, N) uplink rates with co-channel interference from every other active link."""
    y = np.asarray(decision.association, dtype=float)
    z = np.asarray(decision.subcarriers, dtype=float)
    active = y[:, :, None] * z  # (B, N, W)
    p = config.sensor_tx_power_w
    tx = active.sum(axis=0) * p[:, None]  # (N, W) power radiated per sensor and subcarrier
    h = channel.gain  # (N, B, W)
    received = np.einsum("nw,nbw->bw", tx, h)  # total power heard at ES b on w
    own = active * (p[None, :, None] * h.transpose(1, 0, 2))  # (B, N, W)
    interference = received[:, None, :] - own
    interference = np.maximum(interference, 0.0)
    signal = p[None, :, None] * h.transpose(1, 0, 2)
    sinr = signal / (interference + config.noise_power_w[:, None, None])
    return config.subcarrier_bandwidth_hz * (active * np.log2(1.0 + sinr)).sum(axis=2)


def transmission_rate(config, channel, decision, n: int, b: int) -> float:
    return float(transmission_rates(config, channel, decision)[b, n])


def collected_data(decision: FrameDecision, per_sensor_data: np.ndarray) -> np.ndarray:
    """d_c(t) for every partial-DT; per_sensor_data has shape (N, C)."""
    x = np.asarray(decision.assignment, dtype=float)
    y = np.asarray(decision.association, dtype=float)
    return np.einsum("cb,bc->c", x, y @ np.asarray(per_sensor_data, dtype=float))


def check_decision(config: ScenarioConfig, decision: FrameDecision, max_rounds=None, integral_rounds=True) -> list[str]:
    """Feasibility filter. Returns a list of violated constraints (empty if feasible)."""
    C, B, N, W = config.num_partial_dts, config.num_ess, config.num_sensors, config.num_subcarriers
    x, y, z = (np.asarray(a) for a in (decision.assignment, decision.association, decision.subcarriers))
    rounds = np.asarray(decision.training_rounds, dtype=float)
    errs = []
    if x.shape != (C, B) or y.shape != (B, N) or z.shape != (B, N, W) or rounds.shape != (B,):
        return ["shape mismatch"]
    for name, a in (("x", x), ("y", y), ("z", z)):
        if not np.isin(a, (0, 1)).all():
            errs.append(f"{name} not binary")
    if (x.sum(axis=1) != 1).any():
        errs.append("every partial-DT must sit on exactly one ES")
    if (x.sum(axis=0) > 1).any():
        errs.append("an ES holds more than one partial-DT")
    if (y.sum(axis=0) > config.max_assoc_per_sensor).any():
        errs.append("sensor exceeds its association limit")
    if (z > y[:, :, None]).any():
        errs.append("subcarrier granted to an unassociated sensor")
    if ((y == 1) & (z.sum(axis=2) == 0)).any():
        errs.append("associated sensor holds no subcarrier")
    if (z.sum(axis=(1, 2)) > W).any():
        errs.append("ES exceeds its subcarrier budget")
    if (z.sum(axis=1) > 1).any():
        errs.append("subcarrier shared by two sensors at one ES")
    if (rounds < 0).any() or not np.isfinite(rounds).all():
        errs.append("negative or non-finite training rounds")
    if integral_rounds and (rounds != np.round(rounds)).any():
        errs.append("training rounds not integral")
    if max_rounds is not None and (rounds > np.asarray(max_rounds) + 1e-9).any():
        errs.append("training rounds exceed T*")
    return errs


def frame_max_rounds(config: ScenarioConfig, assignment, cumulative_data, collected, t: int) -> np.ndarray:
    es_dt = es_dt_index(assignment)
    out = np.zeros(config.num_ess)
    for b, c in enumerate(es_dt):
        if c >= 0:
            out[b] = max_training_rounds(config, cumulative_data[c] + collected[c], t, c)
    return out


def _safe_div(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.zeros(np.broadcast(num, den).shape)
    pos = num > 0
    ok = pos & (den > 0)
    np.divide(num, den, out=out, where=ok)
    out[pos & ~(den > 0)] = np.inf
    return out


def integration_terms(config: ScenarioConfig, assignment) -> tuple[float, float]:
    """(tau^I, E^I) for integrating every assigned partial-DT at the cloud."""
    x = np.asarray(assignment, dtype=float)
    per_dt = x.sum(axis=1)
    tau = float(np.sum(per_dt * config.model_size_bits) * config.cpu_cycles_per_bit_cloud / config.cpu_speed_cloud_hz)
    access = float(np.sum(per_dt * config.cloud_access_rate * config.cloud_instr_per_dt)) * config.cloud_power_max_w
    energy = access + tau * (config.cloud_power_idle_w + config.cloud_power_leak_w)
    return tau, energy


def evaluate_frame(
    config: ScenarioConfig,
    channel: ChannelState,
    decision: FrameDecision,
    history: HistoryState,
    per_sensor_data: np.ndarray,
    importance: np.ndarray,
    rates: np.ndarray | None = None,
    validate: bool = True,
) -> FrameOutcome:
    """Score one frame. `rates` overrides the interference-aware uplink rates."""
    t = history.frame_index
    x = np.asarray(decision.assignment, dtype=np.int64)
    y = np.asarray(decision.association, dtype=np.int64)
    rounds = np.asarray(decision.training_rounds, dtype=float)
    data = np.asarray(per_sensor_data, dtype=float)
    importance = np.asarray(importance, dtype=float)
    if validate:
        errs = check_decision(config, decision, integral_rounds=False)
        if errs:
            raise InfeasibleDecision("; ".join(errs))

    if rates is None:
        rates = transmission_rates(config, channel, decision)
    es_dt = es_dt_index(x)
    assigned = es_dt >= 0
    B = config.num_ess

    d_c = collected_data(decision, data)
    cum = history.cumulative_data + d_c
    t_star = frame_max_rounds(config, x, history.cumulative_data, d_c, t)
    if validate and (rounds > t_star + 1e-9).any():
        raise InfeasibleDecision("training rounds exceed T*")

    # data each associated sensor ships to its ES for that ES's DT
    es_data = np.zeros((B, config.num_sensors))
    es_data[assigned] = data[:, es_dt[assigned]].T
    shipped = y * es_data
    tx_time = _safe_div(shipped, rates)
    tau_dtr = tx_time.max(axis=1) if config.num_sensors else np.zeros(B)
    e_dtr = (tx_time * config.sensor_tx_power_w[None, :]).sum(axis=1)

    tau_back = np.zeros(B)
    e_back = np.zeros(B)
    x_prev = np.asarray(history.prev_assignment)
    for b in np.nonzero(assigned)[0]:
        c = es_dt[b]
        for src in np.nonzero(x_prev[c])[0]:
            if src == b:
                continue
            dt_time = history.cumulative_data[c] / config.fiber_rate_es_es_bps[src, b]
            tau_back[b] += dt_time
            e_back[b] += config.es_tx_power_w[src] * dt_time

    data_per_es = shipped.sum(axis=1)
    cyc = config.cpu_cycles_per_bit_es
    tau_cre = rounds * data_per_es * cyc / config.cpu_speed_es_hz
    e_cre = config.switched_capacitance * config.cpu_speed_es_hz ** 2 * rounds * cyc

    size = np.zeros(B)
    size[assigned] = config.model_size_bits[es_dt[assigned]]
    tau_mtr = size / config.fiber_rate_es_cloud_bps
    e_mtr = config.es_tx_power_w * size / config.fiber_rate_cloud_es_bps

    tau_i, e_i = integration_terms(config, x)
    es_latency = tau_dtr + tau_back + tau_cre + tau_mtr
    es_energy = e_dtr + e_back + e_cre + e_mtr
    total_latency = float(es_latency.max()) + tau_i
    total_energy = float(es_energy.sum()) + e_i

    quality = np.zeros(config.num_partial_dts)
    es_gain = np.zeros(B)
    for b in np.nonzero(assigned)[0]:
        c = es_dt[b]
        quality[c] = partial_dt_quality(config, c, cum[c], t, rounds[b])
        es_gain[b] = importance[c] * quality[c]
    global_quality = float(np.sum(x * (importance * quality)[:, None]))

    xi, kappa, cconf = config.gain_weight_xi, config.cost_weight_kappa, config.config_cost
    flips = y != np.asarray(history.prev_association)
    es_changed = flips.any(axis=1).astype(np.int64)
    frame_utility = xi * global_quality - kappa * total_energy
    cloud_utility = xi * float(es_gain.sum()) - kappa * total_energy
    es_utilities = xi * es_gain - kappa * es_energy - cconf * es_changed

    return FrameOutcome(
        per_dt_quality=quality,
        global_quality=global_quality,
        collected_data=d_c,
        rates=rates,
        max_rounds=t_star,
        tau_dtr=tau_dtr,
        tau_back=tau_back,
        tau_cre=tau_cre,
        tau_mtr=tau_mtr,
        tau_integration=tau_i,
        total_latency=total_latency,
        e_dtr=e_dtr,
        e_back=e_back,
        e_cre=e_cre,
        e_mtr=e_mtr,
        e_integration=e_i,
        total_energy=total_energy,
        frame_utility=frame_utility,
        cloud_utility=cloud_utility,
        es_utilities=es_utilities,
        config_changes=int(flips.sum()),
        es_changed=es_changed,
        deadline_met=bool(total_latency <= config.frame_deadline_s),
    )


@dataclass
class EsValuer:
    """Utility of one ES as a function of its coalition aggregates.

    Everything that does not depend on the coalition is fixed at construction,
    so U_b(S) costs O(1) given sum of data and sum of uplink energy over S.
    """

    config: ScenarioConfig
    es: int
    dt: int  # -1 when unassigned
    t: int
    importance: float
    history_bits: float
    fixed_energy: float  # back-haul migration plus model upload
    cre_coef: float  # rho F^2 Upsilon, energy per round
    prev_members: frozenset
    _k: float = field(init=False)

    def __post_init__(self):
        self._k = self.config.round_exponent

    def t_star(self, data_sum: float) -> float:
        if self.dt < 0:
            return 0.0
        return float(max_training_rounds(self.config, self.history_bits + data_sum, self.t, self.dt))

    def quality(self, data_sum: float, rounds: float) -> float:
        if self.dt < 0:
            return 0.0
        return float(partial_dt_quality(self.config, self.dt, self.history_bits + data_sum, self.t, rounds))

    def utility(self, data_sum: float, dtr_energy: float, rounds: float, changed: bool) -> float:
        cfg = self.config
        penalty = cfg.config_cost * (1.0 if changed else 0.0)
        if self.dt < 0:
            return -penalty
        gain = cfg.gain_weight_xi * self.importance * self.quality(data_sum, rounds)
        energy = dtr_energy + self.fixed_energy + self.cre_coef * rounds
        return gain - cfg.cost_weight_kappa * energy - penalty


def make_es_valuer(config, es: int, assignment, history: HistoryState, importance) -> EsValuer:
    es_dt = es_dt_index(assignment)
    c = int(es_dt[es])
    fixed = 0.0
    if c >= 0:
        for src in np.nonzero(np.asarray(history.prev_assignment)[c])[0]:
            if src != es:
                fixed += config.es_tx_power_w[src] * history.cumulative_data[c] / config.fiber_rate_es_es_bps[src, es]
        fixed += config.es_tx_power_w[es] * config.model_size_bits[c] / config.fiber_rate_cloud_es_bps[es]
    cre = config.switched_capacitance[es] * config.cpu_speed_es_hz[es] ** 2 * config.cpu_cycles_per_bit_es[es]
    prev = frozenset(np.nonzero(np.asarray(history.prev_association)[es])[0].tolist())
    return EsValuer(
        config=config,
        es=es,
        dt=c,
        t=history.frame_index,
        importance=float(importance[c]) if c >= 0 else 0.0,
        history_bits=float(history.cumulative_data[c]) if c >= 0 else 0.0,
        fixed_energy=float(fixed),
        cre_coef=float(cre) if c >= 0 else 0.0,
        prev_members=prev,
    )


def sensor_contribution(
    config: ScenarioConfig,
    channel: ChannelState,
    decision: FrameDecision,
    history: HistoryState,
    per_sensor_data: np.ndarray,
    importance: np.ndarray,
    b: int,
    n: int,
    rates: np.ndarray | None = None,
) -> float:
    """U_b(Co_b) - U_b(Co_b without n).

    Without n, the rounds are rescaled by T*_{b/n} / T*_b so the ES keeps the
    same fraction of its round budget.
    """
    y = np.asarray(decision.association)
    if y[b, n] != 1:
        raise NotAMember(f"sensor {n} is not associated with ES {b}")
    if rates is None:
        rates = transmission_rates(config, channel, decision)
    val = make_es_valuer(config, b, decision.assignment, history, importance)
    members = np.nonzero(y[b])[0]
    rest = frozenset(members.tolist()) - {n}
    if val.dt < 0:
        data_n = 0.0
        data_sum = 0.0
        e_n = 0.0
    else:
        col = np.asarray(per_sensor_data, dtype=float)[:, val.dt]
        data_n = float(col[n])
        data_sum = float(col[members].sum())
        e_n = float(_safe_div(config.sensor_tx_power_w[n] * data_n, rates[b, n]))
    rounds = float(decision.training_rounds[b])
    t_full = val.t_star(data_sum)
    t_without = val.t_star(data_sum - data_n)
    rounds_without = rounds * t_without / t_full if t_full > 0 else 0.0
    changed_full = frozenset(members.tolist()) != val.prev_members
    changed_without = rest != val.prev_members
    with_n = val.utility(data_sum, e_n, rounds, changed_full)
    without = val.utility(data_sum - data_n, 0.0, rounds_without, changed_without)
    return with_n - without
