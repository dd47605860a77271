"""Command-line entry point: ``onramp <stage> --config cfg.yaml --out DIR``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .carfollow import FAMILIES
from .forest import HORIZONS
from .pipeline import STAGES, StageError, load_config, rescore, run_pipeline, run_stage
from .scenes import SceneGeometry
from .synth import generate_synthetic_corpus, random_scenario

log = logging.getLogger("onramp")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--out", default="bundle", help="bundle directory (default: %(default)s)")
    p.add_argument("--seed", type=int, help="override the top-level seed")
    p.add_argument("--family", action="append", choices=FAMILIES,
                   help="car-following family to fit/forecast (repeatable)")
    p.add_argument("--horizon", action="append", type=int, choices=HORIZONS,
                   help="classification horizon in seconds (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="onramp", description=__doc__)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGES:
        _common(sub.add_parser(name, help=f"run the {name} stage"))
    _common(sub.add_parser("run", help="run every stage in order"))
    rs = sub.add_parser("rescore", help="recompute metric files from stored rows")
    rs.add_argument("--out", default="bundle")
    sy = sub.add_parser("synth", help="write a synthetic raw trajectory file")
    sy.add_argument("path")
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--n-ramp", type=int, default=30)
    sy.add_argument("--n-target", type=int, default=40)
    sy.add_argument("--noise", type=float, default=0.0, help="position noise std in meters")
    return ap


def _config(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.family:
        overrides["cf"] = {"families": sorted(set(args.family), key=FAMILIES.index)}
    if args.horizon:
        overrides["forest"] = {"horizons": sorted(set(args.horizon))}
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            sc = random_scenario(args.seed, args.n_ramp, args.n_target, SceneGeometry(), noise=args.noise)
            corpus = generate_synthetic_corpus(sc)
            corpus.write(args.path)
            print(f"wrote {len(corpus.series)} vehicles to {args.path}")
        elif args.command == "rescore":
            print(json.dumps(rescore(args.out), indent=2, sort_keys=True))
        elif args.command == "run":
            manifest = run_pipeline(_config(args), args.out)
            print(json.dumps(manifest.get("counts", {}), indent=2, sort_keys=True, default=str))
        else:
            result = run_stage(args.command, _config(args), args.out)
            print(json.dumps(result, indent=2, sort_keys=True, default=str))
    except (StageError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
