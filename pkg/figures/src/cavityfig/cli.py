"""Standalone rendering entry point: input/output paths in, image out."""

from __future__ import annotations

import argparse
import sys

from .render import render
from .spec import KINDS, FigureSpec, SchemaError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cavityfig", description="render figures from simulation export tables"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("render", help="render one figure")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--table", required=True, help="delimited-text data file")
    p.add_argument("--meta", default=None, help="JSON sidecar (optional)")
    p.add_argument("--out", required=True, help="output image path (.png, .pdf, .svg)")
    p.add_argument("--value", default=None, help="heatmap value column")
    p.add_argument("--title", default=None)
    p.add_argument("--dpi", type=int, default=150)
    p.add_argument("--raw", action="store_true", help="disable spectrum peak normalization")
    return parser


def main(argv: "list[str] | None" = None) -> int:
    args = build_parser().parse_args(argv)
    options: dict = {"dpi": args.dpi}
    if args.value:
        options["value"] = args.value
    if args.title:
        options["title"] = args.title
    if args.raw:
        options["normalize"] = False
    spec = FigureSpec(kind=args.kind, table=args.table, meta=args.meta, options=options)
    try:
        out = render(spec, args.out)
    except (SchemaError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
