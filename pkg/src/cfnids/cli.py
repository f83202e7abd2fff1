"""Command-line driver: ingest -> preprocess -> train -> distill -> explain
-> evaluate -> rules -> report, config-driven and resumable.

Every subcommand takes --config; artifacts land in the config's output
directory (CFNIDS_OUTPUT overrides it) and completed stages are skipped on
re-runs unless --force is given.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline, report
from .config import METHODS, load_config

log = logging.getLogger("cfnids")

TRAIN_STAGES = {
    "preprocess": pipeline.stage_preprocess,
    "train-classifier": pipeline.stage_train_classifier,
    "train-diffusion": pipeline.stage_train_diffusion,
    "distill": pipeline.stage_distill,
    "train-vcnet": pipeline.stage_train_vcnet,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfnids", description=__doc__)
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False):
        p.add_argument("--config", required=True, help="experiment config (YAML/JSON)")
        p.add_argument("--force", action="store_true", help="re-run completed stages")
        p.add_argument("--output", default=None, help="override the output directory")
        if seed:
            p.add_argument("--seed", type=int, default=0)

    for name in TRAIN_STAGES:
        common(sub.add_parser(name, help=f"run the {name} stage"))

    p = sub.add_parser("explain", help="generate counterfactual explanation CSVs")
    common(p, seed=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--pool-size", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("evaluate", help="aggregate explanation CSVs into reports")
    common(p)

    p = sub.add_parser("rules", help="zero-day hold-out rule extraction")
    common(p, seed=True)
    p.add_argument("--tag", required=True, help="attack category to hold out")
    p.add_argument("--contrast", action="store_true",
                   help="also extract rules from random benign training rows")

    p = sub.add_parser("report", help="render markdown + figures from evaluations")
    common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except (pipeline.PipelineError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    cfg = load_config(args.config)
    if args.output:
        cfg.raw["output_dir"] = args.output
    out_dir = cfg.output_dir
    manifest = pipeline.RunManifest.open(out_dir, cfg.hash, force=args.force)

    if args.command in TRAIN_STAGES:
        ran = TRAIN_STAGES[args.command](cfg, out_dir, manifest, force=args.force)
        print(f"{args.command}: {'completed' if ran else 'skipped (already done)'}")
    elif args.command == "explain":
        pool_size = args.pool_size or cfg["evaluate"]["pool_sizes"][0]
        path = pipeline.run_explain(
            cfg, out_dir, args.method, args.seed, pool_size, k=args.k, jobs=args.jobs
        )
        print(f"explanations written to {path}")
    elif args.command == "evaluate":
        for path in pipeline.run_evaluate(cfg, out_dir):
            print(f"report written to {path}")
    elif args.command == "rules":
        result = pipeline.run_rules(cfg, out_dir, args.tag, args.seed, contrast=args.contrast)
        print(
            f"{len(result.rules)} rules extracted; held-out accuracy "
            f"{result.heldout_accuracy:.3f}; attack filter rate "
            f"{result.filter_metrics['attack_filter_rate']:.3f}"
        )
    elif args.command == "report":
        for path in report.run_report(cfg, out_dir):
            print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
