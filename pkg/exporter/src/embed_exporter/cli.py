"""Command-line entry point for the embedding exporter."""

from __future__ import annotations

import argparse
import sys

from .exporter import ExportError, ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="femb-export",
        description="encode templated item texts with a frozen encoder into an FEMB matrix",
    )
    parser.add_argument("--texts", required=True, help="texts.tsv (id<TAB>template per line)")
    parser.add_argument("--model", required=True, help="encoder name or local path")
    parser.add_argument("--out", required=True, help="output FEMB path (sidecar: <out>.ids)")
    parser.add_argument("--max-length", type=int, default=256)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--device", default="cpu")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(
        texts_path=args.texts,
        model_name=args.model,
        output_path=args.out,
        max_length=args.max_length,
        batch_size=args.batch_size,
        device=args.device,
    )
    try:
        stats = export(job)
    except (ExportError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(
        f"encoded {stats['rows']} texts (dim {stats['dim']}); "
        f"{stats['truncated']} truncated at {stats['max_length']} tokens"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
