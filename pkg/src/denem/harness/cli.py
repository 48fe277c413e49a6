"""Command line entry point: ``denem {synth,train,eval,ablate,heatmap}``."""
import argparse
import sys
from dataclasses import replace
from pathlib import Path

import torch

from denem.harness import pipeline as pl
from denem.harness.config import VARIANTS, load_config


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory (the dataset directory for 'synth')")
    common.add_argument("--dataset", type=Path, help="dataset directory (default: config value)")
    common.add_argument("--workers", type=int, help="parallel fold jobs")
    common.add_argument("--desk-scale", action="store_true", help="small CPU profile")
    common.add_argument("--method", help="method to train or evaluate")

    parser = argparse.ArgumentParser(prog="denem", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic multi-center dataset")
    train = sub.add_parser("train", parents=[common], help="train checkpoints for every LOCO fold")
    train.add_argument("--variants", nargs="+", choices=VARIANTS, help="train these variants (default: the method's)")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a method on every fold")
    ev.add_argument("--methods", nargs="+", help="evaluate several methods into one aggregate CSV")
    ablate = sub.add_parser("ablate", parents=[common], help="run the five-row ablation grid")
    ablate.add_argument("--compare-norms", action="store_true", help="add the batch-norm vs group-norm comparison")
    ablate.add_argument("--skip-train", action="store_true", help="reuse existing checkpoints")
    heat = sub.add_parser("heatmap", parents=[common], help="export baseline and adapted heatmaps")
    heat.add_argument("--frames", nargs="+", required=True, help="core ids whose frames are rendered")
    return parser


def _config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.method is not None:
        overrides["method"] = args.method
    if args.dataset is not None:
        overrides["dataset"] = str(args.dataset)
    if args.out is not None and args.command != "synth":
        overrides["out_dir"] = str(args.out)
    if getattr(args, "compare_norms", False):
        overrides["compare_norms"] = True
    return load_config(args.config, overrides, desk=args.desk_scale)


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    torch.set_num_threads(1)
    cfg = _config(args)
    if args.command == "synth":
        root = pl.cmd_synth(cfg, args.out)
        print(f"dataset written to {root}")
    elif args.command == "train":
        rec = pl.cmd_train(cfg, args.variants)
        print(f"trained {len(rec.flags['training'])} folds in {rec.wall_clock_s:.1f}s -> {cfg.out_dir}")
    elif args.command == "eval":
        rec = pl.cmd_eval(cfg, args.methods)
        print(f"aggregate report: {Path(cfg.out_dir) / 'eval' / 'aggregate.csv'}")
    elif args.command == "ablate":
        pl.cmd_ablate(cfg, train=not args.skip_train)
        print(f"ablation table: {Path(cfg.out_dir) / 'ablation' / 'table.csv'}")
    elif args.command == "heatmap":
        for path in pl.cmd_heatmap(cfg, args.frames):
            print(path)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except KeyboardInterrupt:
        print("denem: interrupted", file=sys.stderr)
        return 130
    except (pl.PipelineError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"denem: error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
