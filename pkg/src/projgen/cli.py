"""Command line entry point: one subcommand per pipeline stage, plus ``all``."""

from __future__ import annotations

import argparse
import logging
import sys

from projgen.config import ConfigError, load_config
from projgen.pipeline import STAGES, DependencyError, Pipeline

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_RUNTIME = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="projgen", description=__doc__)
    sub = p.add_subparsers(dest="stage", required=True)
    for name in STAGES + ("all",):
        s = sub.add_parser(name, help=f"run the {name} stage" if name != "all" else "run every stage in order")
        s.add_argument("--config", required=True, help="YAML or JSON run config")
        s.add_argument("--output-dir", help="override the config's output_dir")
        s.add_argument("--force", action="store_true", help="rerun even if up to date")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "ablate", "all"):
            s.add_argument("--lr", type=float, help="override train.lr_peak")
            s.add_argument("--train-seed", type=int, help="override seeds.train_seed")
        if name in ("build-prompts", "all"):
            s.add_argument("--mcqa-seed", type=int, help="override seeds.mcqa_seed")
            s.add_argument("--mcqa-cap", type=int, help="override filters.mcqa_cap")
        if name in ("probe", "all"):
            s.add_argument("--max-prefixes", type=int, help="override probe.max_prefixes")
    return p


def _apply_overrides(cfg, args):
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if getattr(args, "lr", None) is not None:
        cfg.train.lr_peak = args.lr
    if getattr(args, "train_seed", None) is not None:
        cfg.seeds.train_seed = args.train_seed
    if getattr(args, "mcqa_seed", None) is not None:
        cfg.seeds.mcqa_seed = args.mcqa_seed
    if getattr(args, "mcqa_cap", None) is not None:
        cfg.filters.mcqa_cap = args.mcqa_cap
    if getattr(args, "max_prefixes", None) is not None:
        cfg.probe.max_prefixes = args.max_prefixes
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        pipe = Pipeline(cfg)
        stages = STAGES if args.stage == "all" else (args.stage,)
        for stage in stages:
            status = pipe.run_stage(stage, force=args.force)
            print(f"{stage}: {status}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except Exception as e:  # noqa: BLE001 - the exit code contract covers every other failure
        logging.getLogger("projgen").exception("stage failed")
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
