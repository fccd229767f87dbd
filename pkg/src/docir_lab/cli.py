"""Command-line entry points: train, eval, suite, harvest, curves.

A JSON config file mirroring the flags can be passed with --config;
explicit flags win over the file. DOCIR_LAB_DATA overrides the output
root for runs and suites.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import harness, ppo
from .harness import OBJECT_GRID

REPR_CHOICES = ("docir", "ocr", "flat", "ablation-a", "ablation-b", "ablation-c")


def _load_config(path):
    with open(path) as f:
        return json.load(f)


def _merged(args, parser):
    """Fill unset flags from --config JSON (file values, then argparse defaults)."""
    if not getattr(args, "config", None):
        return args
    file_cfg = _load_config(args.config)
    for key, val in file_cfg.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise SystemExit(f"unknown config key {key!r}")
        if parser.get_default(dest) == getattr(args, dest):
            setattr(args, dest, val)
    return args


def _train_config(args) -> ppo.TrainConfig:
    nc, npl = OBJECT_GRID[args.objects]
    variant = {"fixed": "fixed_target", "varying": "varying_target"}[args.variant]
    out = args.out or os.path.join(
        harness.data_root(),
        f"{args.task}_{args.variant}_{args.objects}obj_{args.repr}_seed{args.seed}")
    hypers = ppo.PPOHypers(rollout_len=args.rollout_len, n_envs=args.n_envs,
                           lr=args.lr)
    return ppo.TrainConfig(task=args.task, variant=variant, n_cubes=nc,
                           n_plates=npl, repr=args.repr, seed=args.seed,
                           total_steps=args.steps, resolution=args.resolution,
                           out_dir=out, init_set_path=args.init_set,
                           deterministic=args.deterministic, hypers=hypers)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="docir-lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one seeded policy")
    p_train.add_argument("--config", help="JSON file mirroring these flags")
    p_train.add_argument("--task", choices=("pick", "place"), default="pick")
    p_train.add_argument("--variant", choices=("fixed", "varying"), default="fixed")
    p_train.add_argument("--objects", type=int, choices=sorted(OBJECT_GRID), default=3)
    p_train.add_argument("--repr", choices=REPR_CHOICES, default="docir")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--steps", type=int, default=1_000_000)
    p_train.add_argument("--resolution", type=int, default=48)
    p_train.add_argument("--rollout-len", type=int, default=512)
    p_train.add_argument("--n-envs", type=int, default=8)
    p_train.add_argument("--lr", type=float, default=3e-4)
    p_train.add_argument("--init-set", help="init-state JSON (required for place)")
    p_train.add_argument("--out", help="run output directory")
    p_train.add_argument("--deterministic", action="store_true",
                         help="single-threaded bit-reproducible mode")

    p_eval = sub.add_parser("eval", help="deterministic checkpoint evaluation")
    p_eval.add_argument("--config")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=100)
    p_eval.add_argument("--ood", choices=("recolor", "distractors"))
    p_eval.add_argument("--count", type=int, default=3,
                        help="distractor count for --ood distractors")

    p_suite = sub.add_parser("suite", help="run a preset experiment matrix")
    p_suite.add_argument("--config")
    p_suite.add_argument("--preset", required=True,
                         choices=("paper-table1-desk", "ablations", "ood"))
    p_suite.add_argument("--steps", type=int,
                         help="override the per-run step budget (10M = full scale)")
    p_suite.add_argument("--init-set", help="shared place init states")
    p_suite.add_argument("--out", help="suite directory")

    p_harv = sub.add_parser("harvest", help="harvest pick terminals for place")
    p_harv.add_argument("--config")
    p_harv.add_argument("--checkpoint", required=True)
    p_harv.add_argument("--n", type=int, default=200)
    p_harv.add_argument("--out")

    p_curves = sub.add_parser("curves", help="aggregate learning curves")
    p_curves.add_argument("--config")
    p_curves.add_argument("--in", dest="inputs", required=True,
                          help="glob over metrics.jsonl files")
    p_curves.add_argument("--out", required=True, help="output path prefix")
    p_curves.add_argument("--window", type=int, default=50)

    args = parser.parse_args(argv)
    sub_parser = {"train": p_train, "eval": p_eval, "suite": p_suite,
                  "harvest": p_harv, "curves": p_curves}[args.command]
    args = _merged(args, sub_parser)

    if args.command == "train":
        cfg = _train_config(args)
        summary = harness.train_run(cfg)
        print(json.dumps(summary, indent=2))
    elif args.command == "eval":
        rate = harness.evaluate(args.checkpoint, episodes=args.episodes,
                                ood=args.ood, distractor_count=args.count)
        print(json.dumps({"success_rate": rate, "episodes": args.episodes,
                          "ood": args.ood}))
    elif args.command == "suite":
        if args.steps and args.steps >= 10_000_000:
            print("warning: full-scale budget selected; expect days of CPU time",
                  file=sys.stderr)
        suite_dir = args.out or os.path.join(harness.data_root(), f"suite_{args.preset}")
        runs = harness.preset_runs(args.preset, steps=args.steps,
                                   init_set_path=args.init_set)
        _, csv_path = harness.run_suite(runs, suite_dir)
        print(csv_path)
    elif args.command == "harvest":
        out = harness.harvest(args.checkpoint, n=args.n, out_path=args.out)
        print(out)
    elif args.command == "curves":
        csv_path, svg_path = harness.curves(args.inputs, args.out,
                                            window=args.window)
        print(csv_path)
        print(svg_path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
