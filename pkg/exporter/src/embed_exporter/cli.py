"""Command line: gdeb-export --encoder NAME --format dialogue|sentence
--in PATH --out PATH [--max-len N] [--layer K]"""

from __future__ import annotations

import argparse
import sys

from .export import ExportSpec, export
from .formats import FormatError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gdeb-export",
        description="Export frozen transformer token embeddings to a GDEB file.")
    parser.add_argument("--encoder", required=True,
                        help="model name or local checkpoint directory")
    parser.add_argument("--format", required=True, dest="input_format",
                        choices=["dialogue", "sentence"])
    parser.add_argument("--in", required=True, dest="in_path")
    parser.add_argument("--out", required=True, dest="out_path")
    parser.add_argument("--max-len", type=int, default=512)
    parser.add_argument("--layer", type=int, default=-1)
    args = parser.parse_args(argv)
    spec = ExportSpec(encoder=args.encoder, input_format=args.input_format,
                      in_path=args.in_path, out_path=args.out_path,
                      max_len=args.max_len, layer=args.layer)
    try:
        summary = export(spec)
    except (FormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {summary['examples']} examples, {summary['relations']} "
          f"relations, d_in={summary['d_in']} -> {summary['out']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
