"""Command-line entry point mirroring ExportConfig."""

from __future__ import annotations

import argparse
import sys

from .export import ExportConfig, ExporterError, export_trace


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab-export",
        description="Capture a routed-expert activation trace (JSON-Lines) "
        "from a pretrained MoE checkpoint.",
    )
    parser.add_argument("--checkpoint", required=True,
                        help="model identifier or local checkpoint directory")
    parser.add_argument("--prompts", required=True,
                        help="calibration input file, one prompt per line")
    parser.add_argument("--out", required=True, help="output .jsonl trace path")
    parser.add_argument("--domain", default="export", help="domain label for the header")
    parser.add_argument("--max-tokens", type=int, default=64,
                        help="cap on tokens per sample (prompt plus continuation)")
    parser.add_argument("--max-new-tokens", type=int, default=16,
                        help="greedy continuation length appended to each prompt")
    parser.add_argument("--input-only", action="store_true",
                        help="capture the prompts alone, without generated continuations")
    parser.add_argument("--device", default="cpu")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    config = ExportConfig(
        checkpoint=args.checkpoint,
        prompts_file=args.prompts,
        output_path=args.out,
        domain=args.domain,
        max_tokens_per_sample=args.max_tokens,
        max_new_tokens=args.max_new_tokens,
        input_only=args.input_only,
        device=args.device,
    )
    try:
        path = export_trace(config)
    except ExporterError as exc:
        print(f"moelab-export: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"moelab-export: error: {exc}", file=sys.stderr)
        return 3
    print(path)
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
