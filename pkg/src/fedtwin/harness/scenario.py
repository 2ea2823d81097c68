"""Scenario templates and seeded world generation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from ..model import GAIN_LEVELS, ChannelState, ConfigError, ScenarioConfig
from ..sim import FrameInputs



def _dbm_to_w(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


@dataclass
class ScenarioTemplate:
    """Parameter ranges for generating worlds.

    Any numeric entry may be a scalar or a [low, high] interval. Intervals are
    sampled once per scenario, independently per device, unless
    `interval_sampling` is "midpoint".
    """

    num_partial_dts: int = 5
    num_ess: int = 5
    num_sensors: int = 20
    num_subcarriers: int = 10
    max_assoc_per_sensor: int = 3
    area_side_m: float = 1000.0
    subcarrier_bandwidth_mhz: object = field(default_factory=lambda: [1.0, 5.0])
    log_norm_beta: float = 200.0
    beta_unit_scale: float = 1e3  # beta is given in kilobits
    lipschitz_L: float = 8.0
    learning_rate_delta: float = 0.02
    strong_convexity_gamma: float = 2.0
    required_quality: object = field(default_factory=lambda: [0.85, 0.95])
    model_size_mbits: object = field(default_factory=lambda: [1.0, 5.0])
    sensor_tx_power_dbm: object = field(default_factory=lambda: [5.0, 33.0])
    es_tx_power_dbm: object = field(default_factory=lambda: [5.0, 33.0])
    noise_dbm_per_hz: float = -104.0
    fiber_rate_mbps: object = field(default_factory=lambda: [1.0, 3.0])
    min_rate_kbps: object = field(default_factory=lambda: [1.0, 5.0])
    cpu_cycles_per_byte_es: float = 120.0
    cpu_speed_es_mhz: float = 64.0
    switched_capacitance: float = 1e-20
    cpu_cycles_per_bit_cloud: float = 15.0
    cpu_speed_cloud_mhz: float = 3000.0
    cloud_access_rate: float = 1e-3
    cloud_instr_per_dt: float = 100.0
    cloud_power_max_w: object = field(default_factory=lambda: [1.0, 60.0])
    cloud_power_idle_w: object = field(default_factory=lambda: [1.0, 60.0])
    cloud_power_leak_w: object = field(default_factory=lambda: [1.0, 60.0])
    gain_weight_xi: float = 10.0
    cost_weight_kappa: float = 0.1
    config_cost: float = 2.0
    frame_deadline_s: float = 7.6
    discount_eta: float = 0.92
    penalty_psi: float = 10.0
    t_max_clamp: int = 200
    data_kbits: object = field(default_factory=lambda: [200.0, 600.0])
    gain_levels: object = field(default_factory=lambda: list(GAIN_LEVELS))
    importance_range: object = field(default_factory=lambda: [0.0, 1.0])
    interval_sampling: str = "per_device"

    def __post_init__(self):
        if self.interval_sampling not in ("per_device", "midpoint"):
            raise ConfigError("interval_sampling must be 'per_device' or 'midpoint'")
        if self.num_ess < self.num_partial_dts:
            raise ConfigError("num_ess must be >= num_partial_dts")

    def replace(self, **changes) -> "ScenarioTemplate":
        data = asdict(self)
        unknown = set(changes) - set(data)
        if unknown:
            raise ConfigError(f"unknown template keys: {sorted(unknown)}")
        data.update(changes)
        return ScenarioTemplate(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "ScenarioTemplate":
        return cls().replace(**(data or {}))


def load_template(path: str | Path | None) -> ScenarioTemplate:
    if path is None:
        return ScenarioTemplate()
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return ScenarioTemplate.from_dict(raw.get("scenario", raw))


class _Sampler:
    def __init__(self, rng: np.random.Generator, midpoint: bool):
        self.rng = rng
        self.midpoint = midpoint

    def __call__(self, spec, size=None):
        if isinstance(spec, (list, tuple)):
            lo, hi = float(spec[0]), float(spec[1])
            if self.midpoint:
                return np.full(size, 0.5 * (lo + hi)) if size is not None else 0.5 * (lo + hi)
            return self.rng.uniform(lo, hi, size=size)
        return np.full(size, float(spec)) if size is not None else float(spec)


def build_config(template: ScenarioTemplate, rng: np.random.Generator) -> ScenarioConfig:
    tp = template
    C, B, N = tp.num_partial_dts, tp.num_ess, tp.num_sensors
    s = _Sampler(rng, tp.interval_sampling == "midpoint")
    es_pos = rng.uniform(0.0, tp.area_side_m, size=(B, 2))
    sensor_pos = rng.uniform(0.0, tp.area_side_m, size=(N, 2))
    bandwidth = float(s(tp.subcarrier_bandwidth_mhz)) * 1e6
    noise = float(_dbm_to_w(tp.noise_dbm_per_hz)) * bandwidth
    es_es = s(tp.fiber_rate_mbps, (B, B)) * 1e6
    es_es = np.triu(es_es) + np.triu(es_es, 1).T  # symmetric links
    return ScenarioConfig(
        num_partial_dts=C,
        num_ess=B,
        num_sensors=N,
        num_subcarriers=tp.num_subcarriers,
        subcarrier_bandwidth_hz=bandwidth,
        max_assoc_per_sensor=tp.max_assoc_per_sensor,
        lipschitz_L=tp.lipschitz_L,
        learning_rate_delta=tp.learning_rate_delta,
        strong_convexity_gamma=tp.strong_convexity_gamma,
        log_norm_beta=tp.log_norm_beta * tp.beta_unit_scale,
        required_quality=s(tp.required_quality, C),
        model_size_bits=s(tp.model_size_mbits, C) * 1e6,
        sensor_tx_power_w=_dbm_to_w(s(tp.sensor_tx_power_dbm, N)),
        es_tx_power_w=_dbm_to_w(s(tp.es_tx_power_dbm, B)),
        noise_power_w=np.full(B, noise),
        fiber_rate_es_cloud_bps=s(tp.fiber_rate_mbps, B) * 1e6,
        fiber_rate_cloud_es_bps=s(tp.fiber_rate_mbps, B) * 1e6,
        fiber_rate_es_es_bps=es_es,
        min_rate_bps=float(s(tp.min_rate_kbps)) * 1e3,
        cpu_cycles_per_bit_es=np.full(B, tp.cpu_cycles_per_byte_es / 8.0),
        cpu_speed_es_hz=np.full(B, tp.cpu_speed_es_mhz * 1e6),
        switched_capacitance=np.full(B, tp.switched_capacitance),
        cpu_cycles_per_bit_cloud=tp.cpu_cycles_per_bit_cloud,
        cpu_speed_cloud_hz=tp.cpu_speed_cloud_mhz * 1e6,
        cloud_access_rate=tp.cloud_access_rate,
        cloud_instr_per_dt=np.full(C, tp.cloud_instr_per_dt),
        cloud_power_max_w=float(s(tp.cloud_power_max_w)),
        cloud_power_idle_w=float(s(tp.cloud_power_idle_w)),
        cloud_power_leak_w=float(s(tp.cloud_power_leak_w)),
        gain_weight_xi=tp.gain_weight_xi,
        cost_weight_kappa=tp.cost_weight_kappa,
        config_cost=tp.config_cost,
        frame_deadline_s=tp.frame_deadline_s,
        discount_eta=tp.discount_eta,
        penalty_psi=tp.penalty_psi,
        es_positions=es_pos,
        sensor_positions=sensor_pos,
        area_side_m=tp.area_side_m,
        t_max_clamp=tp.t_max_clamp,
        cloud_noise_power_w=noise,
        cloud_switched_capacitance=tp.switched_capacitance,
    )


@dataclass(frozen=True, eq=False)
class World:
    """A concrete scenario plus its seeded per-frame input stream."""

    config: ScenarioConfig
    seed: int
    template: ScenarioTemplate

    def inputs(self, t: int) -> FrameInputs:
        return _frame_inputs(self, t)

    def rng(self, stream: int) -> np.random.Generator:
        """Independent generator for policy-side randomness."""
        return np.random.default_rng(np.random.SeedSequence([self.seed, 2, stream]))

    def with_config(self, config: ScenarioConfig) -> "World":
        return World(config, self.seed, self.template)


@lru_cache(maxsize=4096)
def _frame_inputs(world: World, t: int) -> FrameInputs:
    cfg, tp = world.config, world.template
    N, B, W, C = cfg.num_sensors, cfg.num_ess, cfg.num_subcarriers, cfg.num_partial_dts
    rng = np.random.default_rng(np.random.SeedSequence([world.seed, 1, t]))
    levels = np.asarray(tp.gain_levels, dtype=float)
    gain = rng.choice(levels, size=(N, B, W))
    cloud_gain = rng.choice(levels, size=(N, W))
    lo, hi = tp.data_kbits
    data = rng.uniform(lo, hi, size=(N, C)) * 1e3
    ilo, ihi = tp.importance_range
    importance = rng.uniform(ilo, ihi, size=C)
    for a in (gain, cloud_gain, data, importance):
        a.setflags(write=False)
    return FrameInputs(ChannelState(gain, t, cloud_gain), data, importance)


def generate_scenario(seed: int, template: ScenarioTemplate | None = None) -> World:
    template = template or ScenarioTemplate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    return World(build_config(template, rng), int(seed), template)
