"""Offline audit of a JSONL run trace against the model's invariants."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..baselines import centra_history, centra_view
from ..coalition import CoalitionGame, admissible_ops, can_join, can_quit, can_transfer
from ..matching import Matching, PreferenceLists, find_blocking_pairs
from ..model import FrameDecision, check_decision, evaluate_frame
from ..sim import EpisodeState
from .scenario import ScenarioTemplate, generate_scenario

REL_TOL = 1e-9
_REQUIRED = {
    "episode": ("schema", "seed", "policy", "framework", "frames", "template"),
    "switch": ("seed", "t", "call", "index", "assignment", "round_fraction", "max_assoc", "partition_before", "op"),
    "socf": ("seed", "t", "call", "assignment", "round_fraction", "max_assoc", "initial", "final", "zeta"),
    "frame": ("seed", "t", "framework", "decision", "outcome"),
}
_OP_KEYS = ("kind", "sensor", "source", "target", "delta_un", "zeta_before", "zeta_after")


class CorruptTrace(ValueError):
    pass


@dataclass
class Violation:
    line: int  # 1-based line number in the trace file
    kind: str
    message: str


@dataclass
class VerifyReport:
    records: int = 0
    switches: int = 0
    frames: int = 0
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _close(a: float, b: float, scale: float = 1.0) -> bool:
    return abs(a - b) <= REL_TOL * max(1.0, abs(scale))


def _load(lines) -> list[dict]:
    records = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptTrace(f"line {i}: not JSON ({exc})") from exc
        kind = rec.get("kind") if isinstance(rec, dict) else None
        if kind not in _REQUIRED:
            raise CorruptTrace(f"line {i}: unknown record kind {kind!r}")
        missing = [k for k in _REQUIRED[kind] if k not in rec]
        if kind == "switch" and isinstance(rec.get("op"), dict):
            missing += [f"op.{k}" for k in _OP_KEYS if k not in rec["op"]]
        if missing:
            raise CorruptTrace(f"line {i}: {kind} record lacks {missing}")
        rec["_line"] = i
        records.append(rec)
    if records and records[0]["kind"] != "episode":
        raise CorruptTrace("trace must start with an episode header")
    return records


def _decision(cfg, d: dict) -> FrameDecision:
    B, N, W = cfg.num_ess, cfg.num_sensors, cfg.num_subcarriers
    z = np.zeros((B, N, W), dtype=np.int64)
    for b, n, w in d["subcarriers"]:
        z[b, n, w] = 1
    return FrameDecision(
        np.asarray(d["assignment"], dtype=np.int64),
        np.asarray(d["association"], dtype=np.int64),
        z,
        np.asarray(d["training_rounds"], dtype=float),
    )


class _Episode:
    def __init__(self, header: dict):
        self.world = generate_scenario(header["seed"], ScenarioTemplate.from_dict(header["template"]))
        self.framework = header["framework"]
        self.state = EpisodeState.start(self.world.config)
        self.view_history = self.state.history
        self.games: dict[tuple, CoalitionGame] = {}

    def game(self, rec) -> CoalitionGame:
        key = (rec["t"], rec["call"], json.dumps(rec["assignment"]), json.dumps(rec["round_fraction"]), rec["max_assoc"])
        if key not in self.games:
            inputs = self.world.inputs(rec["t"])
            self.games[key] = CoalitionGame(
                self.world.config,
                inputs.channel,
                np.asarray(rec["assignment"], dtype=np.int64),
                np.asarray(rec["round_fraction"], dtype=float),
                self.state.history,
                inputs.data,
                inputs.importance,
                rec["max_assoc"],
            )
        return self.games[key]


def _partition(raw, B: int) -> list[frozenset]:
    if len(raw) != B:
        raise ValueError(f"partition has {len(raw)} coalitions, expected {B}")
    return [frozenset(int(n) for n in co) for co in raw]


def _check_switch(ep: _Episode, rec: dict) -> list[str]:
    game = ep.game(rec)
    cfg = game.config
    op = rec["op"]
    before = _partition(rec["partition_before"], cfg.num_ess)
    n, a, b, kind = op["sensor"], op["source"], op["target"], op["kind"]
    problems = []
    if kind == "transfer":
        ok = a is not None and b is not None and n in before[a] and n not in before[b]
        ok = ok and can_transfer(game, before, n, a, b)[0]
    elif kind == "join":
        ok = b is not None and n not in before[b] and can_join(game, before, n, b)[0]
    elif kind == "quit":
        ok = a is not None and n in before[a] and can_quit(game, before, n, a)[0]
    else:
        return [f"unknown switch kind {kind!r}"]
    if not ok:
        return [f"{kind} of sensor {n} ({a} -> {b}) is not admissible"]
    after = list(before)
    if a is not None:
        after[a] = after[a] - {n}
    if b is not None:
        after[b] = after[b] | {n}
    z0, z1 = game.potential(before), game.potential(after)
    if not _close(z0, op["zeta_before"], z0):
        problems.append(f"recorded potential before {op['zeta_before']!r} != {z0!r}")
    if not _close(z1, op["zeta_after"], z1):
        problems.append(f"recorded potential after {op['zeta_after']!r} != {z1!r}")
    if not _close(z1 - z0, op["delta_un"], z1):
        problems.append(f"potential change {z1 - z0!r} != moving-sensor change {op['delta_un']!r}")
    if not z1 > z0 and kind != "quit":
        problems.append("applied switch did not strictly raise the potential")
    counts = np.zeros(cfg.num_sensors, dtype=np.int64)
    for co in after:
        for m in co:
            counts[m] += 1
    if (counts > game.max_assoc).any():
        problems.append("association limit exceeded after switch")
    if any(len(co) > game.capacity for co in after):
        problems.append("subcarrier budget exceeded after switch")
    return problems


def _check_socf(ep: _Episode, rec: dict) -> list[str]:
    game = ep.game(rec)
    problems = []
    zeta = rec["zeta"]
    if any(z1 < z0 - REL_TOL * max(1.0, abs(z0)) for z0, z1 in zip(zeta, zeta[1:])):
        problems.append("potential decreased during coalition formation")
    final = _partition(rec["final"], game.config.num_ess)
    leftover = admissible_ops(game, final)
    if leftover:
        problems.append(f"final partition is not switch-stable ({len(leftover)} admissible switches)")
    return problems


def _check_frame(ep: _Episode, rec: dict) -> list[str]:
    cfg = ep.world.config
    inputs = ep.world.inputs(rec["t"])
    problems = []
    expected = ep.view_history.frame_index if ep.framework == "centra" else ep.state.t
    if rec["t"] != expected:
        return [f"frame {rec['t']} out of order (expected {expected})"]
    if ep.framework == "centra":
        view, channel = centra_view(cfg, inputs.channel)
        history = centra_history(cfg, ep.view_history)
    else:
        view, channel, history = cfg, inputs.channel, ep.state.history
    decision = _decision(view, rec["decision"])
    errors = check_decision(view, decision)
    if errors:
        return [f"infeasible decision: {errors}"]
    out = evaluate_frame(view, channel, decision, history, inputs.data, inputs.importance, validate=False)
    errors = check_decision(view, decision, out.max_rounds)
    if errors:
        problems.append(f"infeasible decision: {errors}")
    rec_out = rec["outcome"]
    for name in ("total_latency", "total_energy", "frame_utility", "cloud_utility", "e_integration"):
        if float(getattr(out, name)) != rec_out[name]:
            problems.append(f"{name} recorded {rec_out[name]!r}, recomputed {float(getattr(out, name))!r}")
    if out.es_utilities.tolist() != rec_out["es_utilities"]:
        problems.append("per-ES utilities do not match recomputation")
    if out.config_changes != rec_out["config_changes"]:
        problems.append("configuration change count does not match recomputation")
    # totals are the max / sum of their stage components
    if out.total_latency != float(out.es_latency.max()) + out.tau_integration:
        problems.append("total latency is not max(ES latency) + integration latency")
    if out.total_energy != float(out.es_energy.sum()) + out.e_integration:
        problems.append("total energy is not the sum of stage energies")
    # U(t) equals the per-ES decomposition with their configuration charges added back
    k, c = view.cost_weight_kappa, view.config_cost
    alt = float(out.es_utilities.sum()) + c * float(out.es_changed.sum()) - k * out.e_integration
    if not _close(out.frame_utility, alt, out.frame_utility):
        problems.append("U(t) differs from the per-ES decomposition")
    if not _close(out.frame_utility, out.cloud_utility, out.frame_utility):
        problems.append("U(t) differs from the cloud-side utility")
    prefs = rec.get("preferences")
    if prefs:
        lists = PreferenceLists(np.asarray(prefs["dt"], dtype=float), np.asarray(prefs["es"], dtype=float))
        x = decision.assignment
        matching = Matching(tuple(int(np.argmax(row)) for row in x))
        if find_blocking_pairs(lists, matching):
            problems.append("assignment has blocking pairs under the recorded preferences")
    if ep.framework == "centra":
        ep.view_history = history.advance(decision, out)
    else:
        ep.state = ep.state.advance(decision, out)
    ep.games.clear()
    return problems


_CHECKS = {"switch": _check_switch, "socf": _check_socf, "frame": _check_frame}


def verify_records(lines) -> VerifyReport:
    records = _load(lines)
    report = VerifyReport(records=len(records))
    ep = None
    for rec in records:
        kind = rec["kind"]
        if kind == "episode":
            ep = _Episode(rec)
            continue
        if rec["seed"] != ep.world.seed:
            report.violations.append(Violation(rec["_line"], kind, "seed does not match the episode header"))
            continue
        try:
            problems = _CHECKS[kind](ep, rec)
        except (ValueError, IndexError, KeyError, TypeError) as exc:
            problems = [f"malformed record: {exc}"]
        report.switches += kind == "switch"
        report.frames += kind == "frame"
        for p in problems:
            report.violations.append(Violation(rec["_line"], kind, p))
    return report


def verify_trace(path: str | Path) -> VerifyReport:
    with open(path, encoding="utf-8") as fh:
        return verify_records(fh.readlines())
