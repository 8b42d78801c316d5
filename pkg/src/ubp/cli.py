"""Command-line driver: ``ubp <subcommand> [--config PATH] [--seed N] ...``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from .config import ConfigError, load_config, render_config
from .pipeline import STAGES, ConfigMismatchError, MissingArtifactError, run_stage

log = logging.getLogger("ubp")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ubp", description="Universal behavioral profile pipeline")
    p.add_argument("subcommand", choices=STAGES + ("all", "show-config"))
    p.add_argument("--config", help="INI run config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--threads", type=int, help="cap BLAS/worker threads (run.threads)")
    p.add_argument("--workdir", help="override run.workdir")
    scale = p.add_mutually_exclusive_group()
    scale.add_argument("--desk", dest="scale", action="store_const", const="desk")
    scale.add_argument("--paper", dest="scale", action="store_const", const="paper")
    p.set_defaults(scale="desk")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("UBP_LOG", "INFO").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, scale=args.scale)
        run = cfg.run
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("run.seed: must be non-negative")
            run = dataclasses.replace(run, seed=args.seed)
        if args.threads is not None:
            if args.threads <= 0:
                raise ConfigError("run.threads: must be positive")
            run = dataclasses.replace(run, threads=args.threads)
        if args.workdir is not None:
            run = dataclasses.replace(run, workdir=args.workdir)
        cfg = dataclasses.replace(cfg, run=run)
        if args.subcommand == "show-config":
            print(render_config(cfg))
            return 0
        with threadpool_limits(limits=cfg.run.threads):
            run_stage(args.subcommand, cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except (MissingArtifactError, ConfigMismatchError) as exc:
        log.error("%s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
