"""Experiment orchestration: policies x frameworks x seeds x sweep points, CSV metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..baselines import (
    TabularQ,
    centra_history,
    centra_simulate,
    centra_view,
    gre_policy,
    q_action_space,
    run_q_episode,
    train_tabular_q,
)
from ..coalition import SocfTrace
from ..drl.dmo import DmoAgents, DmoConfig, dmo_step, dmo_train
from ..model import ConfigError, FrameDecision, FrameOutcome, check_decision, evaluate_frame
from ..sim import EpisodeState, deadline_penalty, shaped_utility
from .scenario import ScenarioTemplate, World, generate_scenario

SCHEMA_VERSION = 1
POLICIES = ("dmo", "gre", "ql")
FRAMEWORKS = ("federated", "centra", "nonoverlap")
SWEEP_AXES = {"none": None, "xi": "gain_weight_xi", "kappa": "cost_weight_kappa", "cconf": "config_cost"}

COLUMNS = (
    "seed",
    "t",
    "utility",
    "shaped_utility",
    "gain",
    "cost",
    "penalty",
    "cum_utility",
    "cum_gain",
    "cum_cost",
    "tau_total",
    "deadline_met",
    "config_changes",
    "socf_iterations",
    "transfers",
    "joins",
    "quits",
)
CUMULATIVE = {"cum_utility": "shaped_utility", "cum_gain": "gain", "cum_cost": "cost"}


@dataclass
class ExperimentSpec:
    template: ScenarioTemplate = field(default_factory=ScenarioTemplate)
    policy: str = "gre"
    framework: str = "federated"
    frames: int = 100
    seeds: tuple[int, ...] = tuple(range(10))
    sweep_axis: str = "none"
    sweep_values: tuple[float, ...] = ()
    out_dir: str | None = None
    trace: bool = False
    train_seeds: tuple[int, ...] = tuple(range(1000, 1008))
    train_episodes: int = 40  # 4000 frames at the default 100 frames per episode
    train_seed: int = 0
    dmo: DmoConfig = field(default_factory=DmoConfig)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.sweep_values = tuple(float(v) for v in self.sweep_values)
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}")
        if self.framework not in FRAMEWORKS:
            raise ConfigError(f"framework must be one of {FRAMEWORKS}")
        if self.framework == "centra" and self.policy != "gre":
            raise ConfigError("the centralized framework is evaluated with the gre optimizer")
        if self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep axis must be one of {tuple(SWEEP_AXES)}")
        if self.sweep_axis != "none" and not self.sweep_values:
            raise ConfigError("a sweep needs a non-empty value grid")

    def points(self) -> list[float | None]:
        return [None] if self.sweep_axis == "none" else list(self.sweep_values)

    def template_at(self, value: float | None) -> ScenarioTemplate:
        if value is None:
            return self.template
        return self.template.replace(**{SWEEP_AXES[self.sweep_axis]: value})


@dataclass(frozen=True)
class MetricsRow:
    seed: int
    t: int
    utility: float  # U(t)
    shaped_utility: float  # U(t) - C^Conf F(t) - deadline penalty
    gain: float  # xi * A^Global(t)
    cost: float  # kappa * E^Total(t) + C^Conf F(t)
    penalty: float
    cum_utility: float
    cum_gain: float
    cum_cost: float
    tau_total: float
    deadline_met: bool
    config_changes: int
    socf_iterations: int
    transfers: int
    joins: int
    quits: int

    def cells(self) -> list[str]:
        out = []
        for name in COLUMNS:
            v = getattr(self, name)
            out.append(str(int(v)) if isinstance(v, (bool, np.bool_)) else repr(v) if isinstance(v, float) else str(v))
        return out


@dataclass
class PointSummary:
    value: float | None
    cum_utility: tuple[float, float]
    cum_gain: tuple[float, float]
    cum_cost: tuple[float, float]
    switches: tuple[float, float]  # total configuration changes per run
    deadline_misses: tuple[float, float]


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rows: dict  # sweep value -> list[MetricsRow]
    summaries: list[PointSummary]
    files: list[Path] = field(default_factory=list)


class _Accumulator:
    def __init__(self, seed: int):
        self.seed = seed
        self.cum = {k: 0.0 for k in CUMULATIVE}

    def row(self, cfg, t, outcome: FrameOutcome, traces: list[SocfTrace]) -> MetricsRow:
        penalty = deadline_penalty(cfg, outcome)
        gain = cfg.gain_weight_xi * outcome.global_quality
        cost = cfg.cost_weight_kappa * outcome.total_energy + cfg.config_cost * outcome.config_changes
        per = {"shaped_utility": shaped_utility(cfg, outcome), "gain": gain, "cost": cost}
        for k, src in CUMULATIVE.items():
            self.cum[k] += per[src]
        counts = {"transfer": 0, "join": 0, "quit": 0}
        for tr in traces:
            for k, v in tr.counts().items():
                counts[k] += v
        return MetricsRow(
            seed=self.seed,
            t=t,
            utility=float(outcome.frame_utility),
            shaped_utility=float(per["shaped_utility"]),
            gain=float(gain),
            cost=float(cost),
            penalty=float(penalty),
            cum_utility=float(self.cum["cum_utility"]),
            cum_gain=float(self.cum["cum_gain"]),
            cum_cost=float(self.cum["cum_cost"]),
            tau_total=float(outcome.total_latency),
            deadline_met=bool(outcome.deadline_met),
            config_changes=int(outcome.config_changes),
            socf_iterations=int(sum(tr.passes for tr in traces)),
            transfers=counts["transfer"],
            joins=counts["join"],
            quits=counts["quit"],
        )


# ---------------------------------------------------------------- trained policies


def training_worlds(spec: ExperimentSpec) -> list[World]:
    return [generate_scenario(s, spec.template) for s in spec.train_seeds]


def train_dmo_agents(spec: ExperimentSpec, progress=None):
    worlds = training_worlds(spec)
    data_max = float(np.max(spec.template.data_kbits)) * 1e3
    return dmo_train(worlds, spec.train_episodes, spec.frames, spec.dmo, spec.train_seed, data_max, progress=progress)


def train_ql_table(spec: ExperimentSpec) -> TabularQ:
    worlds = training_worlds(spec)
    if spec.framework == "nonoverlap":
        worlds = [w.with_config(w.config.with_updates(max_assoc_per_sensor=1)) for w in worlds]
    q, _ = train_tabular_q(worlds, spec.train_episodes, spec.frames, spec.train_seed)
    return q


# ---------------------------------------------------------------- episode runners


def _trace_frame(writer, seed, t, framework, decision: FrameDecision, outcome: FrameOutcome, traces, extra=None):
    if writer is None:
        return
    for i, tr in enumerate(traces):
        for k, op in enumerate(tr.ops):
            writer.write(
                {
                    "kind": "switch",
                    "seed": seed,
                    "t": t,
                    "call": i,
                    "index": k,
                    "assignment": tr.assignment,
                    "round_fraction": tr.round_fraction,
                    "max_assoc": tr.max_assoc,
                    "partition_before": tr.snapshots[k],
                    "op": op.to_dict(),
                }
            )
        writer.write(
            {
                "kind": "socf",
                "seed": seed,
                "t": t,
                "call": i,
                "assignment": tr.assignment,
                "round_fraction": tr.round_fraction,
                "max_assoc": tr.max_assoc,
                "initial": tr.initial,
                "final": _final_partition(tr),
                "zeta": tr.zeta,
            }
        )
    record = {
        "kind": "frame",
        "seed": seed,
        "t": t,
        "framework": framework,
        "decision": {
            "assignment": decision.assignment.tolist(),
            "association": decision.association.tolist(),
            "subcarriers": np.argwhere(decision.subcarriers).tolist(),
            "training_rounds": decision.training_rounds.tolist(),
        },
        "outcome": {
            "total_latency": float(outcome.total_latency),
            "total_energy": float(outcome.total_energy),
            "frame_utility": float(outcome.frame_utility),
            "cloud_utility": float(outcome.cloud_utility),
            "es_utilities": outcome.es_utilities.tolist(),
            "e_integration": float(outcome.e_integration),
            "config_changes": int(outcome.config_changes),
            "es_changed": np.asarray(outcome.es_changed).tolist(),
        },
    }
    if extra:
        record.update(extra)
    writer.write(record)


def _final_partition(tr: SocfTrace) -> list[list[int]]:
    coalitions = [set(co) for co in tr.initial]
    for op in tr.ops:
        if op.source is not None:
            coalitions[op.source].discard(op.sensor)
        if op.target is not None:
            coalitions[op.target].add(op.sensor)
    return [sorted(co) for co in coalitions]


def run_episode(spec: ExperimentSpec, world: World, trained=None, writer=None) -> list[MetricsRow]:
    """Play one seeded world for spec.frames frames and return its metrics rows."""
    cfg = world.config
    acc = _Accumulator(world.seed)
    rows = []
    rng = world.rng(0)
    if writer is not None:
        writer.write(
            {
                "kind": "episode",
                "schema": SCHEMA_VERSION,
                "seed": world.seed,
                "policy": spec.policy,
                "framework": spec.framework,
                "frames": spec.frames,
                "template": world.template.to_dict(),
            }
        )

    if spec.framework == "centra":
        state = EpisodeState.start(cfg)
        vhist = state.history
        for t in range(1, spec.frames + 1):
            inputs = world.inputs(t)
            decision, outcome, vh = centra_simulate(cfg, inputs, vhist)
            view = centra_view(cfg, inputs.channel)[0]
            _require_feasible(view, decision, outcome, t)
            vhist = vh.advance(decision, outcome)
            rows.append(acc.row(view, t, outcome, []))
            _trace_frame(writer, world.seed, t, spec.framework, decision, outcome, [])
        return rows

    max_assoc = 1 if spec.framework == "nonoverlap" else None
    if spec.policy == "ql":
        q: TabularQ = trained
        run_cfg = cfg.with_updates(max_assoc_per_sensor=1) if max_assoc else cfg
        run_world = world.with_config(run_cfg)
        actions = q_action_space(run_cfg)

        def on_frame(t, decision, outcome):
            _require_feasible(run_cfg, decision, outcome, t)
            rows.append(acc.row(run_cfg, t, outcome, []))
            _trace_frame(writer, world.seed, t, spec.framework, decision, outcome, [])

        run_q_episode(q, actions, run_world, spec.frames, rng, explore=False, learn=False, on_frame=on_frame)
        return rows

    state = EpisodeState.start(cfg)
    fraction = np.zeros(cfg.num_ess)
    for t in range(1, spec.frames + 1):
        inputs = world.inputs(t)
        traces, extra = [], None
        if spec.policy == "gre":
            decision = gre_policy(cfg, inputs, state.history, max_assoc=max_assoc)
            outcome = evaluate_frame(cfg, inputs.channel, decision, state.history, inputs.data, inputs.importance)
        else:
            agents: DmoAgents = trained
            result = dmo_step(
                agents, cfg, inputs, state, rng, explore=False, store=False, max_assoc=max_assoc, prev_fraction=fraction
            )
            decision, outcome, traces = result.decision, result.outcome, result.traces
            fraction = result.round_fraction
            extra = {"preferences": result.preferences}
        _require_feasible(cfg, decision, outcome, t)
        rows.append(acc.row(cfg, t, outcome, traces))
        _trace_frame(writer, world.seed, t, spec.framework, decision, outcome, traces, extra)
        state = state.advance(decision, outcome)
    return rows


def _require_feasible(cfg, decision, outcome, t):
    errors = check_decision(cfg, decision, outcome.max_rounds)
    if errors:
        raise AssertionError(f"infeasible decision at t={t}: {errors}")


# ---------------------------------------------------------------- persistence


class TraceWriter:
    def __init__(self, path: Path):
        self.fh = open(path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self.fh.close()


def _point_tag(spec: ExperimentSpec, value) -> str:
    base = f"{spec.policy}_{spec.framework}"
    return base if value is None else f"{base}_{spec.sweep_axis}={value!r}"


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema fedtwin-metrics v{SCHEMA_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("# schema fedtwin-metrics"):
            raise ValueError("missing schema line")
        return list(csv.DictReader(fh))


def _mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std())


def summarize(value, rows: list[MetricsRow]) -> PointSummary:
    last = {}
    switches, misses = {}, {}
    for r in rows:
        last[r.seed] = r
        switches[r.seed] = switches.get(r.seed, 0) + r.config_changes
        misses[r.seed] = misses.get(r.seed, 0) + (not r.deadline_met)
    seeds = sorted(last)
    return PointSummary(
        value,
        _mean_std([last[s].cum_utility for s in seeds]),
        _mean_std([last[s].cum_gain for s in seeds]),
        _mean_std([last[s].cum_cost for s in seeds]),
        _mean_std([switches[s] for s in seeds]),
        _mean_std([misses[s] for s in seeds]),
    )


def summary_text(spec: ExperimentSpec, summaries: list[PointSummary]) -> str:
    lines = [
        f"schema=fedtwin-summary v{SCHEMA_VERSION}",
        f"policy={spec.policy}",
        f"framework={spec.framework}",
        f"frames={spec.frames}",
        f"seeds={','.join(str(s) for s in spec.seeds)}",
        f"sweep_axis={spec.sweep_axis}",
    ]
    for i, s in enumerate(summaries):
        p = f"point{i}"
        lines.append(f"{p}.value={'' if s.value is None else repr(s.value)}")
        for name in ("cum_utility", "cum_gain", "cum_cost", "switches", "deadline_misses"):
            mean, std = getattr(s, name)
            lines.append(f"{p}.{name}.mean={mean!r}")
            lines.append(f"{p}.{name}.std={std!r}")
    return "\n".join(lines) + "\n"


def parse_summary(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k] = v
    return out


# ---------------------------------------------------------------- driver


def run_experiment(spec: ExperimentSpec, trained=None, progress=None) -> ExperimentResult:
    """Run every seed at every sweep point; write CSV/summary files when out_dir is set.

    `trained` supplies DMO agents or a Q table; when absent they are trained
    on spec.train_seeds at the base template. Rows of finished points are
    flushed to disk before any later error propagates.
    """
    if trained is None and spec.policy == "dmo":
        trained = train_dmo_agents(spec, progress).agents
    if trained is None and spec.policy == "ql":
        trained = train_ql_table(spec)
    out = Path(spec.out_dir) if spec.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = ExperimentResult(spec, {}, [])
    try:
        for value in spec.points():
            template = spec.template_at(value)
            writer = None
            if out is not None and spec.trace:
                writer = TraceWriter(out / f"trace_{_point_tag(spec, value)}.jsonl")
            rows = []
            try:
                for seed in spec.seeds:
                    world = generate_scenario(seed, template)
                    rows.extend(run_episode(spec, world, trained, writer))
            finally:
                if writer is not None:
                    writer.close()
                result.rows[value] = rows
                if out is not None:
                    path = out / f"metrics_{_point_tag(spec, value)}.csv"
                    path.write_text(metrics_csv(rows), encoding="utf-8")
                    result.files.append(path)
            result.summaries.append(summarize(value, rows))
    finally:
        if out is not None and result.summaries:
            path = out / f"summary_{spec.policy}_{spec.framework}.txt"
            path.write_text(summary_text(spec, result.summaries), encoding="utf-8")
            result.files.append(path)
    return result


def spec_to_dict(spec: ExperimentSpec) -> dict:
    d = asdict(spec)
    d["template"] = spec.template.to_dict()
    return d
