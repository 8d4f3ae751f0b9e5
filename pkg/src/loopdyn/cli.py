"""Command-line entry point.

Exit codes: 0 success, 1 spec or input error, 2 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness as H
from . import model as M
from .errors import DivergedForwardError, LoopdynError, SpecError
from .weights_io import inspect_weights, save_weights

EXIT_OK, EXIT_SPEC, EXIT_DIVERGED = 0, 1, 2

_KIND_FOR = {
    "stability-grid": H.ExperimentKind.STABILITY_GRID,
    "dynamics": H.ExperimentKind.DYNAMICS,
    "classify": H.ExperimentKind.CLASSIFY,
    "metrics": H.ExperimentKind.METRICS,
    "trajectory": H.ExperimentKind.TRAJECTORY,
    "prop2-audit": H.ExperimentKind.PROP2_AUDIT,
}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spec", type=Path, help="YAML experiment spec")
    p.add_argument("--out", type=Path, help="output directory (overrides the spec file)")
    p.add_argument("--seed", type=_u64, help="run a single seed (overrides the spec file)")
    p.add_argument("--loops", type=int, help="number of recurrences (overrides the spec file)")
    p.add_argument("--threads", type=int, default=1, help="parallel runs (results do not depend on it)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loopdyn", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in _KIND_FOR:
        _common(sub.add_parser(name, help=f"run a {_KIND_FOR[name].value} experiment"))
    iw = sub.add_parser("init-weights", help="write a random-init weight file")
    _common(iw)
    iw.add_argument("--file", type=Path, help="weight file path (default <out>/weights.bin)")
    ins = sub.add_parser("inspect-weights", help="print a weight file's header summary")
    ins.add_argument("path", type=Path)
    return ap


def _spec_for(args, kind: H.ExperimentKind) -> H.ExperimentSpec:
    spec = H.load_spec(args.spec) if args.spec else H.ExperimentSpec(kind=kind)
    if spec.kind is not kind:
        raise SpecError(f"spec kind {spec.kind.value} does not match the subcommand", "kind")
    over = {}
    if args.out is not None:
        over["output"] = str(args.out)
    if args.seed is not None:
        over["seeds"] = [args.seed]
    if args.loops is not None:
        over["loops"] = args.loops
    return replace(spec, **over) if over else spec


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "inspect-weights":
            print(json.dumps(inspect_weights(args.path), indent=1, sort_keys=True))
            return EXIT_OK
        if args.command == "init-weights":
            spec = _spec_for(args, H.ExperimentKind.DYNAMICS) if args.spec is None else H.load_spec(args.spec)
            seed = args.seed if args.seed is not None else spec.seeds[0]
            weights = M.init_random(spec.config_for(seed))
            path = args.file or Path(args.out or spec.output) / "weights.bin"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_weights(weights, path)
            print(path)
            return EXIT_OK
        if args.threads < 1:
            raise SpecError("--threads must be >= 1", "--threads")
        spec = _spec_for(args, _KIND_FOR[args.command])
        artifacts, diverged = H.run_experiment(spec, args.threads)
        for p in H.emit_outputs(artifacts, spec.output):
            logging.info("wrote %s", p)
        return EXIT_DIVERGED if diverged else EXIT_OK
    except DivergedForwardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (LoopdynError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC


if __name__ == "__main__":
    sys.exit(main())
