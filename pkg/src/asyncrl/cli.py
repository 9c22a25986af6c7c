"""Command-line entry points: run, ablate, simulate, export."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .harness import ExperimentConfig, export_report, run_ablation, run_experiment
from .timeline import CostModel, LengthDistribution, SimConfig, simulate


def _parse_eta(text: str) -> int | None:
    if text.lower() in ("inf", "none", "unbounded"):
        return None
    return int(text)


def _load_config(args) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfig.load(Path(args.config))
    else:
        config = ExperimentConfig()
    overrides = {}
    for name in ("task_kind", "objective", "seed", "mode", "schedule_mode"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "eta", None) is not None:
        overrides["eta"] = _parse_eta(args.eta)
    if getattr(args, "steps", None) is not None:
        overrides["total_steps"] = args.steps
    return dataclasses.replace(config, **overrides) if overrides else config


def _add_run_overrides(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--task-kind", dest="task_kind",
                        choices=("copy", "modular_sum"))
    parser.add_argument("--eta", help="staleness budget (integer or 'inf')")
    parser.add_argument("--objective", choices=("decoupled", "naive"))
    parser.add_argument("--seed", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--mode", choices=("simulated", "live"))
    parser.add_argument("--schedule-mode", dest="schedule_mode",
                        choices=("sync", "one_step_overlap",
                                 "async_noninterruptible", "async_interruptible"))
    parser.add_argument("--out", help="output directory")


def cmd_run(args) -> int:
    config = _load_config(args)
    result = run_experiment(config, out_dir=args.out, resume_from=args.resume)
    last = result.records[-1] if result.records else None
    print(f"steps: {len(result.records)}")
    if last is not None:
        print(f"final train success: {last.success_rate:.3f}")
    print(f"held-out success: {result.final_success:.3f}")
    if result.out_dir:
        print(f"outputs: {result.out_dir}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    etas = [_parse_eta(x) for x in args.etas.split(",")]
    objectives = args.objectives.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    result = run_ablation(config, etas, objectives, seeds=seeds, out_dir=args.out)
    print(f"{'eta':>6} {'objective':>10} {'mean success':>13}")
    for (eta, objective), mean in result["summary"].items():
        print(f"{eta:>6} {objective:>10} {mean:>13.3f}")
    if args.out:
        print(f"outputs: {args.out}")
    return 0


def cmd_simulate(args) -> int:
    lengths = LengthDistribution(
        kind=args.dist, fixed=args.fixed, low=args.low, high=args.high,
        alpha=args.alpha, scale=args.scale, cap=args.cap)
    config = SimConfig(
        schedule_mode=args.schedule_mode, n_workers=args.workers,
        worker_slots=args.slots, batch_size=args.batch_size,
        eta=_parse_eta(args.eta), train_steps=args.steps, lengths=lengths,
        seed=args.seed, reward_latency=args.reward_latency)
    cost = CostModel(
        gen_seconds_per_token=args.gen_spt,
        train_seconds_per_token=args.train_spt,
        weight_sync_seconds=args.sync_seconds,
        recompute_seconds_per_token=args.recompute_spt)
    report = simulate(config, cost)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_export(args) -> int:
    written = export_report(args.runs, args.out)
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asyncrl",
        description="Asynchronous RL training testbed with staleness control "
                    "and a decoupled PPO objective.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="train one configuration end to end")
    _add_run_overrides(run_p)
    run_p.add_argument("--resume", help="checkpoint .npz to resume from")
    run_p.set_defaults(fn=cmd_run)

    ab_p = sub.add_parser("ablate", help="staleness x objective matrix")
    _add_run_overrides(ab_p)
    ab_p.add_argument("--etas", default="0,4,16,inf",
                      help="comma list of staleness budgets ('inf' allowed)")
    ab_p.add_argument("--objectives", default="decoupled,naive")
    ab_p.add_argument("--seeds", default="1,2,3")
    ab_p.set_defaults(fn=cmd_ablate)

    sim_p = sub.add_parser("simulate",
                           help="discrete-event timing model (no learning)")
    sim_p.add_argument("--schedule-mode", dest="schedule_mode",
                       default="async_interruptible",
                       choices=("sync", "one_step_overlap",
                                "async_noninterruptible", "async_interruptible"))
    sim_p.add_argument("--workers", type=int, default=4)
    sim_p.add_argument("--slots", type=int, default=4)
    sim_p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    sim_p.add_argument("--eta", default="1")
    sim_p.add_argument("--steps", type=int, default=50)
    sim_p.add_argument("--seed", type=int, default=0)
    sim_p.add_argument("--dist", default="pareto",
                       choices=("fixed", "uniform", "pareto"))
    sim_p.add_argument("--fixed", type=int, default=32)
    sim_p.add_argument("--low", type=int, default=8)
    sim_p.add_argument("--high", type=int, default=64)
    sim_p.add_argument("--alpha", type=float, default=1.2)
    sim_p.add_argument("--scale", type=float, default=8.0)
    sim_p.add_argument("--cap", type=int, default=512)
    sim_p.add_argument("--gen-spt", dest="gen_spt", type=float, default=1.0)
    sim_p.add_argument("--train-spt", dest="train_spt", type=float, default=0.25)
    sim_p.add_argument("--sync-seconds", dest="sync_seconds", type=float, default=0.0)
    sim_p.add_argument("--recompute-spt", dest="recompute_spt", type=float,
                       default=0.0)
    sim_p.add_argument("--reward-latency", dest="reward_latency", type=float,
                       default=0.0)
    sim_p.add_argument("--out", help="write the report JSON here")
    sim_p.set_defaults(fn=cmd_simulate)

    exp_p = sub.add_parser("export", help="plot-ready CSV exports from run dirs")
    exp_p.add_argument("--runs", nargs="+", required=True)
    exp_p.add_argument("--out", required=True)
    exp_p.set_defaults(fn=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
