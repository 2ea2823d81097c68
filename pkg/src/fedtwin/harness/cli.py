"""Command-line entry point: run, train, sweep, verify, compare."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import yaml

from ..drl.dmo import DmoAgents, DmoConfig
from ..drl.ppo import PPOConfig
from .experiment import FRAMEWORKS, POLICIES, SWEEP_AXES, ExperimentSpec, run_experiment, train_dmo_agents
from .scenario import ScenarioTemplate, generate_scenario
from .verify import CorruptTrace, verify_trace


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return yaml.safe_load(fh) or {}


def _dmo_config(raw: dict) -> DmoConfig:
    raw = dict(raw or {})
    ppo = PPOConfig(**raw.pop("ppo", {}))
    return DmoConfig(ppo=ppo, **raw)


def _spec(args, **overrides) -> ExperimentSpec:
    raw = _load_config(args.config)
    template = ScenarioTemplate.from_dict(raw.get("scenario", {}))
    exp = dict(raw.get("experiment", {}))
    if args.seed is not None or args.seeds is not None:
        first = args.seed if args.seed is not None else 0
        exp["seeds"] = tuple(range(first, first + (args.seeds if args.seeds is not None else 1)))
    for name in ("frames", "policy", "framework"):
        if getattr(args, name, None) is not None:
            exp[name] = getattr(args, name)
    if args.out is not None:
        exp["out_dir"] = args.out
    exp["trace"] = bool(getattr(args, "trace", False)) or exp.get("trace", False)
    for key in ("seeds", "train_seeds", "sweep_values"):
        if key in exp:
            exp[key] = tuple(exp[key])
    exp.update(overrides)
    return ExperimentSpec(template=template, dmo=_dmo_config(raw.get("dmo")), **exp)


def _load_agents(spec: ExperimentSpec, path: str) -> DmoAgents:
    world = generate_scenario(spec.train_seeds[0], spec.template)
    agents = DmoAgents(world.config, spec.dmo, spec.train_seed, float(np.max(spec.template.data_kbits)) * 1e3)
    agents.load(path)
    return agents


def _print_summary(result) -> None:
    for s in result.summaries:
        label = "" if s.value is None else f"{result.spec.sweep_axis}={s.value!r} "
        print(
            f"{label}utility {s.cum_utility[0]:.3f} +- {s.cum_utility[1]:.3f}  "
            f"gain {s.cum_gain[0]:.3f}  cost {s.cum_cost[0]:.3f}  switches {s.switches[0]:.1f}  "
            f"misses {s.deadline_misses[0]:.1f}"
        )


def cmd_run(args) -> int:
    spec = _spec(args)
    trained = _load_agents(spec, args.agents) if args.agents and spec.policy == "dmo" else None
    result = run_experiment(spec, trained)
    _print_summary(result)
    for f in result.files:
        print(f"wrote {f}")
    return 0


def cmd_train(args) -> int:
    spec = _spec(args, policy="dmo")
    if args.episodes is not None:
        spec.train_episodes = args.episodes
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    curve_path = out / "learning_curve.csv"
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("episode,cumulative_utility\n")

        def progress(ep, value):
            fh.write(f"{ep},{value!r}\n")
            fh.flush()

        result = train_dmo_agents(spec, progress)
    ckpt = out / "agents.npz"
    result.agents.save(ckpt)
    print(f"wrote {ckpt} and {curve_path}")
    return 0


def cmd_sweep(args) -> int:
    values = tuple(float(v) for v in args.values.split(","))
    spec = _spec(args, sweep_axis=args.axis, sweep_values=values)
    trained = _load_agents(spec, args.agents) if args.agents and spec.policy == "dmo" else None
    result = run_experiment(spec, trained)
    _print_summary(result)
    return 0


def cmd_verify(args) -> int:
    try:
        report = verify_trace(args.trace_file)
    except (CorruptTrace, OSError) as exc:
        print(f"corrupt trace: {exc}", file=sys.stderr)
        return 2
    for v in report.violations:
        print(f"line {v.line} [{v.kind}] {v.message}", file=sys.stderr)
    print(f"checked {report.records} records ({report.frames} frames, {report.switches} switches), "
          f"{len(report.violations)} violations")
    return 0 if report.ok else 1


def cmd_compare(args) -> int:
    raw_spec = _spec(args)
    rows = []
    agents = _load_agents(raw_spec, args.agents) if args.agents else None
    for policy, framework in (("dmo", "federated"), ("gre", "federated"), ("ql", "federated"),
                              ("gre", "nonoverlap"), ("gre", "centra")):
        if policy == "dmo" and agents is None and not args.train:
            continue
        spec = _spec(args, policy=policy, framework=framework)
        result = run_experiment(spec, agents if policy == "dmo" else None)
        s = result.summaries[0]
        rows.append((policy, framework, s))
    print(f"{'policy':<6} {'framework':<11} {'utility':>14} {'gain':>12} {'cost':>12} {'switches':>9}")
    for policy, framework, s in rows:
        print(f"{policy:<6} {framework:<11} {s.cum_utility[0]:>14.3f} {s.cum_gain[0]:>12.3f} "
              f"{s.cum_cost[0]:>12.3f} {s.switches[0]:>9.1f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedtwin", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML file with scenario / experiment / dmo sections")
        p.add_argument("--seed", type=int, help="first evaluation seed")
        p.add_argument("--seeds", type=int, help="number of consecutive evaluation seeds")
        p.add_argument("--frames", type=int, help="frames per episode")
        p.add_argument("--policy", choices=POLICIES)
        p.add_argument("--framework", choices=FRAMEWORKS)
        p.add_argument("--out", help="output directory")
        p.add_argument("--trace", action="store_true", help="also write a JSONL audit trace")
        p.add_argument("--agents", help="DMO checkpoint (.npz) to evaluate instead of training")

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="train DMO agents and write a checkpoint")
    common(p)
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid over one weight")
    common(p)
    p.add_argument("--axis", choices=[k for k in SWEEP_AXES if k != "none"], required=True)
    p.add_argument("--values", required=True, help="comma-separated grid")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="audit a JSONL trace")
    p.add_argument("trace_file")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("compare", help="paired table of optimizers and frameworks")
    common(p)
    p.add_argument("--train", action="store_true", help="train DMO when no checkpoint is given")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
