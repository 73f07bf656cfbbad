"""Command line entry point.

    escgan <stage> --config run.ini --seed 0 --out runs/a [--profile desk]
    escgan synth --out data/mini [--per-class 50 --classes 3]
    escgan profile desk

Exit codes: 0 success, 2 configuration error, 3 missing upstream stage,
4 bad input data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline, synth
from .audio_io import AudioError
from .config import PROFILES, ConfigError, load_config, profile_text

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_DATA = 0, 2, 3, 4


def _stage_parser(sub, name: str) -> None:
    p = sub.add_parser(name, help=f"run the {name} stage" if name != "all" else "run every stage in order")
    p.add_argument("--config", type=Path, help="INI file layered over the profile")
    p.add_argument("--seed", type=int, default=0, help="run seed (unsigned 64-bit)")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--profile", choices=PROFILES, help="named profile applied before --config")
    p.add_argument("--cache", type=Path, help="content-addressed cache shared between runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="escgan", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in pipeline.STAGES + ("all",):
        _stage_parser(sub, stage)
    s = sub.add_parser("synth", help="write the synthetic tonal mini-dataset and a matching config")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--per-class", type=int, default=50)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("profile", help="print a profile's INI text")
    p.add_argument("name", choices=("base",) + PROFILES)
    return parser


def _run_stage(args) -> int:
    if not 0 <= args.seed < 2 ** 64:
        raise ConfigError("--seed must be an unsigned 64-bit integer")
    cfg = load_config(args.config, profile=args.profile, seed=args.seed)
    report = pipeline.run_stage(args.command, cfg, args.out, cache_dir=args.cache)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            manifest = synth.write_dataset(args.out, args.per_class, args.classes, seed=args.seed)
            (args.out / "run.ini").write_text(f"[dataset]\nname = synthetic\nmanifest = {manifest.name}\n")
            print(json.dumps({"manifest": str(manifest), "config": str(args.out / "run.ini")}))
            return EXIT_OK
        if args.command == "profile":
            sys.stdout.write(profile_text(args.name))
            return EXIT_OK
        return _run_stage(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (pipeline.DataError, AudioError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
