"""Command-line entry point ``segfuse``.

Exit codes: 0 success, 2 configuration error, 3 missing artifact, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from segfuse import pipeline
from segfuse.config import ExperimentConfig
from segfuse.errors import ConfigError, DataIOError, SegfuseError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_IO = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="overrides the config key 'seed'")
    p.add_argument("--out", type=Path, help="overrides the config key 'output_dir'")
    p.add_argument("--force", action="store_true", default=None, help="overrides 'force': overwrite an existing dataset")
    p.add_argument("--oracle-first-frame", action="store_true", default=None,
                   help="overrides 'evaluate.oracle_first_frame': anchor propagation on the ground-truth first mask")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segfuse", description="Static, temporal and fused fruit segmentation on synthetic video.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("generate", help="write the synthetic dataset"))
    p = sub.add_parser("train", help="train one model")
    p.add_argument("stage", choices=pipeline.STAGES)
    _common(p)
    _common(sub.add_parser("evaluate", help="score every model row on the test clips and write the tables"))
    p = sub.add_parser("propagate", help="carry a first-frame mask through a clip directory")
    p.add_argument("clip_dir", type=Path, help="directory of frame_%%05d.png files")
    p.add_argument("first_mask", type=Path, help="mask PNG for the first frame")
    p.add_argument("--checkpoint", type=Path, help="cycle checkpoint (default <output_dir>/checkpoints/cycle.ckpt); --out names the destination")
    _common(p)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    # for propagate, --out names the mask destination; checkpoints still come from the config's output_dir
    out = str(args.out) if args.out and args.command != "propagate" else None
    return cfg.with_overrides(seed=args.seed, output_dir=out, force=args.force,
                              oracle_first_frame=args.oracle_first_frame)


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = resolve_config(args)
    if args.command == "generate":
        pipeline.generate(cfg)
    elif args.command == "train":
        pipeline.train(cfg, args.stage)
    elif args.command == "evaluate":
        for report in pipeline.evaluate(cfg).values():
            print(f"{report.model_name:<14} P {report.precision:.4f}  IoU {report.iou:.4f}")
    else:
        out = args.out or Path(cfg.output_dir) / "propagated"
        pipeline.propagate(cfg, args.clip_dir, args.first_mask, out, args.checkpoint)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    try:
        return run(argv)
    except SegfuseError as exc:
        print(f"segfuse: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"segfuse: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
