"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 I/O or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .config import load_config
from .errors import CheckpointError, ConfigError, DatasetError, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def _common(p):
    p.add_argument("--config", help="TOML experiment config (defaults apply when omitted)")
    p.add_argument("--output", help="override output_dir")
    p.add_argument("--seed", type=int, help="override global_seed")


def build_parser():
    parser = argparse.ArgumentParser(prog="advdetect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("train", "train the classifier head on a frozen backbone"),
        ("sweep", "FGSM epsilon sweep with degradation metrics and plots"),
        ("detect", "calibrate thresholds and score clean/adversarial inputs"),
        ("make-dataset", "write the synthetic shapes dataset to --output"),
    ]:
        _common(sub.add_parser(name, help=help_text))
    v = sub.add_parser("verify", help="rehash and revalidate a run directory")
    _common(v)
    v.add_argument("run", nargs="?", help="run directory or manifest.json (default: output_dir)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(args.output, args.seed)
        if args.command == "make-dataset":
            counts = harness.cmd_make_dataset(cfg)
            print(json.dumps({"dataset_root": cfg.output_dir, "splits": counts}))
        elif args.command == "train":
            rows = harness.cmd_train(cfg)
            final = [r for r in rows if r.phase == "train"][-1:] or [None]
            print(f"trained {cfg.train.epochs} epochs; final train accuracy "
                  f"{final[0].accuracy:.4f}" if final[0] else "no epochs run; checkpoint is the initialization")
        elif args.command == "sweep":
            for r in harness.cmd_sweep(cfg):
                print(f"eps={r.epsilon:.2f} pixel_acc={r.pixel_acc:.4f} mIoU={r.mIoU:.4f} "
                      f"mIoU_agg={r.mIoU_agg:.4f} mF1={r.mF1:.4f}")
        elif args.command == "detect":
            summary = harness.cmd_detect(cfg)
            print(json.dumps(summary["auroc"], indent=2, sort_keys=True))
        elif args.command == "verify":
            report = harness.cmd_verify(args.run or cfg.output_dir)
            for msg in report.failures:
                print(f"FAIL {msg}")
            print(f"{'PASS' if report.ok else 'FAIL'}: {len(report.checked)} artifacts checked, "
                  f"{len(report.failures)} failures")
            return EXIT_OK if report.ok else EXIT_INVALID
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, DatasetError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
