"""Command line entry point: ``mango-attack <subcommand>``.

Exit codes: 0 success, 1 verification failure, 2 configuration error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from ._kernels import BACKEND

log = logging.getLogger("mango_attack")


def _common(p):
    p.add_argument("--config", type=Path, help="TOML file with [task] [attack] [optimizer] [zoo]")
    p.add_argument("--variant", choices=("mango", "naive", "gray"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--workers", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="mango-attack", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [("attack", "run one variant over the task batch"),
                        ("gap-trace", "per-step continuous vs quantized loss traces"),
                        ("compare", "paired mango vs naive report")]:
        _common(sub.add_parser(name, help=help_))
    g = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-6)
    z = sub.add_parser("zoo-check", help="zeroth-order estimator vs analytic gradient")
    z.add_argument("--samples", type=int, default=1000)
    z.add_argument("--mu", type=float, default=1e-3)
    z.add_argument("--seeds", type=int, default=10)
    return parser


def _print_report(report):
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.debug("kernel backend: %s", BACKEND)

    if args.command == "gradcheck":
        return _print_report(harness.run_gradcheck(range(args.seeds), args.h, args.tol))
    if args.command == "zoo-check":
        return _print_report(harness.run_zoocheck(args.samples, args.mu, range(args.seeds)))

    try:
        spec, cfg = harness.load_config(args.config, args.variant, args.seed)
        if args.command == "attack":
            manifest = harness.run_batch(spec, cfg, args.out, args.workers)
            print(json.dumps(manifest["metrics"], indent=2))
        elif args.command == "gap-trace":
            traces = harness.gap_trace(spec, cfg, args.out)
            print(f"wrote {len(traces)} traces to {args.out}")
        elif args.command == "compare":
            report = harness.compare_variants(spec, cfg, args.out, args.workers)
            report.pop("pairs")
            print(json.dumps(report, indent=2))
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
