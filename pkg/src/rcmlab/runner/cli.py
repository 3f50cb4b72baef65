"""``rcmlab <experiment> --config FILE`` and ``rcmlab replay RECORD``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import EXPERIMENTS, ConfigError, config_from_dict, parse_config
from .record import (STATUS_ERROR, STATUS_OK, RecordExists, SchemaMismatch, replay,
                     run_experiment)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2

log = logging.getLogger("rcmlab")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rcmlab", description="Random conductance model experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=True, type=Path, help="INI-style config file")
        p.add_argument("--seed", type=int, help="override the base seed")
        p.add_argument("--out", type=Path, help="override the output directory")
        p.add_argument("--threads", type=int, default=1, help="worker threads over seeds")
        p.add_argument("--deterministic", action="store_true",
                       help="force single-threaded execution")
    r = sub.add_parser("replay", help="re-run a record and diff its outputs")
    r.add_argument("record", type=Path, help="record.json or the directory holding it")
    r.add_argument("--threads", type=int, default=1)
    return ap


def _load(args):
    cfg = parse_config(args.config.read_text(), experiment=args.command)
    over = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError([f"--seed = {args.seed} out of range (>= 0)"])
        over["base_seed"] = args.seed
    if args.out is not None:
        over["out_dir"] = str(args.out)
    if over:
        # rebuild the text so the record embeds the effective config
        cfg = config_from_dict(replace(cfg, **over).as_dict())
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "replay":
        try:
            report = replay(args.record, threads=max(1, args.threads))
        except (SchemaMismatch, ValueError, OSError) as exc:
            log.error("replay failed: %s", exc)
            return EXIT_ERROR
        print(report.summary())
        return EXIT_OK if report.clean else EXIT_CHECK_FAILED
    try:
        cfg = _load(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    threads = 1 if args.deterministic else max(1, args.threads)
    try:
        rec = run_experiment(cfg, threads=threads)
    except (RecordExists, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    out = Path(cfg.out_dir) / "record.json"
    if rec.status == STATUS_ERROR:
        log.error("%s (failure marker written to %s)", rec.error, out)
        return EXIT_ERROR
    if rec.status != STATUS_OK:
        log.warning("failed checks: %s", ", ".join(rec.failed_checks))
        print(f"{cfg.experiment}: checks failed, record at {out}")
        return EXIT_CHECK_FAILED
    print(f"{cfg.experiment}: ok, {len(rec.seeds)} seed(s), record at {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
