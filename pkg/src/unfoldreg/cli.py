"""Command-line entry point: ``unfoldreg <generate|train|reconstruct|evaluate|verify>``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import experiment
from .errors import StateError, UnfoldRegError

log = logging.getLogger("unfoldreg")

EXIT_OK, EXIT_ACCEPTANCE = 0, 5


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="experiment config (JSON, comments allowed)")
    parser.add_argument("--seed", type=int, default=default, help="override the problem and training seeds")
    parser.add_argument("--out", default=default, help="run directory (default: the config's output)")
    parser.add_argument("--force", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="overwrite a non-empty output directory")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="worker threads for evaluation")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser():
    parser = argparse.ArgumentParser(prog="unfoldreg", description=__doc__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    sub.add_parser("generate", parents=[common], help="write the synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train the network and the penalty")
    p.add_argument("--resume", action="store_true", help="continue from the last training-state checkpoint")
    p = sub.add_parser("reconstruct", parents=[common], help="reconstruct measurements with early stopping")
    p.add_argument("measurement", help="signal file (manifest .json) holding y_delta; delta in its metadata")
    p.add_argument("--dest", help="output directory (default: <out>/recon)")
    p.add_argument("--tau", type=float, help="override the stopping constant")
    sub.add_parser("evaluate", parents=[common], help="per-layer NMSE curves and image metrics")
    sub.add_parser("verify", parents=[common], help="theory checks with pass/fail report")
    return parser


def _load_config(args):
    if args.config:
        return config_mod.load(args.config, seed=args.seed, out=args.out)
    return config_mod.resolve(seed=args.seed, out=args.out)


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    cfg = _load_config(args)
    out = Path(cfg["output"])

    if args.command == "generate":
        manifest = experiment.generate(cfg, out, force=args.force)
        print(json.dumps({"entries": len(manifest["entries"]), "counts": manifest["counts"]}))
    elif args.command == "train":
        if not args.resume and (out / "checkpoints").exists() and any((out / "checkpoints").iterdir()) \
                and not args.force:
            raise StateError(f"{out / 'checkpoints'} is not empty (use --force or --resume)")
        record = experiment.train_run(cfg, out, resume=args.resume, log=log.debug)
        print(json.dumps(record, sort_keys=True))
    elif args.command == "reconstruct":
        dest = Path(args.dest) if args.dest else out / "recon"
        result = experiment.reconstruct_file(cfg, out, args.measurement, dest, tau=args.tau)
        print(json.dumps(result, sort_keys=True))
    elif args.command == "evaluate":
        summary = experiment.evaluate(cfg, out)
        print(json.dumps(summary["model"] | {"zero_filled_nmse": summary["zero_filled"]["nmse"]}))
    elif args.command == "verify":
        report = experiment.verify(cfg, out, threads=args.threads)
        for name, check in report["checks"].items():
            print(f"{'PASS' if check['passed'] else 'FAIL'} {name}")
        return EXIT_OK if report["passed"] else EXIT_ACCEPTANCE
    return EXIT_OK


def main(argv=None):
    try:
        return run(argv)
    except UnfoldRegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
