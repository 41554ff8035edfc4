"""Command-line entry points: train, evaluate, snapshot-goals, compare."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from mapgo.gomdp import EnvironmentConfig
from mapgo.relabel import Fgi, HerFuture
from mapgo.trainer import (ExperimentConfig, Trainer, config_from_dict,
                           evaluate, load_config, load_probe, run_training,
                           snapshot_relabeled_goals, write_goal_snapshot_csv)


def _cmd_train(args):
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    trainer = Trainer(config, out_dir=args.out)
    if args.resume:
        meta = trainer.load_networks(args.resume)
        print(f"resumed networks from {args.resume} (env_steps={meta.get('env_steps')})")
    log = trainer.run()
    evals = log.eval_rows
    if evals:
        last = evals[-1]
        print(f"done: {config.training.episodes} episodes, "
              f"final success_rate={last['success_rate']:.3f} "
              f"mean_return={last['mean_return']:.2f}")
    else:
        print(f"done: {config.training.episodes} episodes (no evaluation points)")
    return 0


def _trainer_from_checkpoint(path):
    from mapgo.nets import load_checkpoint
    comps, meta = load_checkpoint(path)
    config = config_from_dict(meta["config"])
    trainer = Trainer(config, out_dir=None)
    trainer.load_networks(path)
    return trainer, meta


def _cmd_evaluate(args):
    trainer, meta = _trainer_from_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    success, mean_return = evaluate(trainer.ac.act, trainer.env.config,
                                    episodes=args.episodes, rng=rng)
    print(json.dumps({"checkpoint": str(args.checkpoint), "episodes": args.episodes,
                      "success_rate": success, "mean_return": mean_return},
                     sort_keys=True))
    return 0


def _cmd_snapshot_goals(args):
    trainer, meta = _trainer_from_checkpoint(args.checkpoint)
    probe_path = args.probe or str(Path(args.checkpoint).parent / "probe.npz")
    probe = load_probe(probe_path)
    if args.strategy == "her":
        strategy = HerFuture()
    else:
        if trainer.ensemble is None or not trainer.ensemble.trained:
            print("checkpoint has no trained dynamics ensemble; cannot snapshot fgi",
                  file=sys.stderr)
            return 2
        strategy = Fgi(model=trainer.ensemble, policy=trainer.ac.act,
                       max_rollout_length=trainer.config.relabel.max_rollout_length,
                       her_fallback=trainer.config.relabel.her_fallback,
                       condition_on=trainer.config.relabel.condition_on)
    tag = args.episode_tag if args.episode_tag is not None else meta.get("episode", 0)
    rows = snapshot_relabeled_goals(probe, strategy, tag,
                                    np.random.default_rng(args.seed),
                                    trainer.env.config.epsilon, trainer.env.goal_map)
    out = args.out or f"goals_{tag}.csv"
    write_goal_snapshot_csv(out, rows)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def _cmd_compare(args):
    report = {"runs": {}}
    for run_dir in args.runs:
        curve = Path(run_dir) / "curve.csv"
        if not curve.exists():
            print(f"missing {curve}", file=sys.stderr)
            return 2
        with open(curve) as f:
            rows = list(csv.DictReader(f))
        if not rows:
            print(f"empty curve in {run_dir}", file=sys.stderr)
            return 2
        last = rows[-1]
        report["runs"][str(run_dir)] = {
            "env_steps": int(last["env_steps"]),
            "final_success_rate": float(last["success_rate"]),
            "final_mean_return": float(last["mean_return"]),
            "points": len(rows),
        }
    finals = [r["final_success_rate"] for r in report["runs"].values()]
    report["mean_final_success_rate"] = float(np.mean(finals))
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mapgo",
                                description="Goal-oriented model-based RL runner")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training experiment from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--resume", default=None,
                   help="checkpoint to load networks from before training")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpointed policy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_cmd_evaluate)

    s = sub.add_parser("snapshot-goals",
                       help="relabel the frozen probe set with a checkpointed policy/model")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--strategy", choices=("her", "fgi"), required=True)
    s.add_argument("--probe", default=None,
                   help="probe.npz path (default: next to the checkpoint)")
    s.add_argument("--episode-tag", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=_cmd_snapshot_goals)

    c = sub.add_parser("compare", help="summarize final results across run directories")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--report", default=None)
    c.set_defaults(func=_cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
