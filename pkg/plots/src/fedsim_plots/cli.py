"""fedplot: render figures from fedsim metrics.csv files."""

from __future__ import annotations

import argparse
import sys

from .frames import SchemaError
from .render import CURVE_METRICS, plot_curves, plot_roundtime_violin


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedplot", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_curves = sub.add_parser("curves", help="per-strategy metric curves over rounds")
    p_curves.add_argument("--in", dest="inputs", nargs="+", required=True,
                          help="metrics.csv files, one per strategy")
    p_curves.add_argument("--out", required=True, help="output image file")
    p_curves.add_argument("--metric", choices=list(CURVE_METRICS), default="train_loss")

    p_violin = sub.add_parser("violin", help="round-length distribution, log scale")
    p_violin.add_argument("--in", dest="inputs", nargs="+", required=True)
    p_violin.add_argument("--out", required=True)
    p_violin.add_argument("--tau", type=float, default=None,
                          help="deadline; defaults to the tau column when consistent")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "curves":
            plot_curves(args.inputs, args.metric, args.out)
        else:
            plot_roundtime_violin(args.inputs, args.tau, args.out)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io failure: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
