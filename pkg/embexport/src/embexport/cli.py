"""Command-line entry points for table export and corpus tokenization."""

import argparse
import json
import sys

from .export import ExportError, export_table, tokenize_corpus


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="embexport", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("table", help="export a model's embedding table (EMBT)")
    p.add_argument("model", help="model directory or hub identifier")
    p.add_argument("out", help="output .embt path")
    p.add_argument("--manifest", help="also write a JSON manifest here")

    p = sub.add_parser("corpus", help="tokenize a text file into JSONL")
    p.add_argument("model", help="model directory or hub identifier")
    p.add_argument("text", help="UTF-8 text file, one document per line")
    p.add_argument("out", help="output .jsonl path")
    p.add_argument("--max-len", type=int, default=32)

    args = parser.parse_args(argv)
    try:
        if args.command == "table":
            manifest = export_table(args.model, args.out, manifest_path=args.manifest)
            print(json.dumps(manifest.to_dict(), indent=1, sort_keys=True))
        else:
            count = tokenize_corpus(args.model, args.text, args.out, max_len=args.max_len)
            print(json.dumps({"sequences": count, "path": args.out}))
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
