"""Command-line front end wiring the pipeline end to end.

Subcommands: gen-model, gen-domain, trace, score, plan, apply, overlap,
perturb, audit, report. Every subcommand reads and writes the documented
file formats, is deterministic given (inputs, seed, workers=1), and
overwrites outputs byte-identically on re-runs.

Exit codes: 0 success, 2 usage, 3 missing/unreadable file, 4 format version
mismatch, 5 corrupt or malformed file, 6 validation failure. Failures print
one machine-parsable line to stderr:  ``moelab: error: kind=<kind> detail=<msg>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import analysis, perturb, pruning, scoring, synthlab, trace as trace_mod
from .errors import (
    ChecksumError,
    FormatError,
    MoelabError,
    NumericsError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)
from .model import ModelConfig, build_model, forward_sequence, read_model, write_model
from .parallel import WORKERS_ENV

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VERSION = 4
EXIT_CORRUPT = 5
EXIT_VALIDATION = 6


class UsageError(MoelabError):
    """Bad flag combination caught after argparse."""


def _error_kind(exc: Exception) -> tuple[str, int]:
    if isinstance(exc, UsageError):
        return "usage", EXIT_USAGE
    if isinstance(exc, VersionMismatchError):
        return "version", EXIT_VERSION
    if isinstance(exc, (ChecksumError, TruncatedFileError, FormatError)):
        return "corrupt", EXIT_CORRUPT
    if isinstance(exc, (ValidationError, NumericsError)):
        return "validation", EXIT_VALIDATION
    if isinstance(exc, FileNotFoundError):
        return "missing-file", EXIT_IO
    if isinstance(exc, OSError):
        return "io", EXIT_IO
    return "internal", 1


def _load_fixture(spec: str) -> synthlab.Fixture:
    if spec == "default":
        return synthlab.load_default_fixture()
    return synthlab.read_fixture(spec)


def _load_tokens(path: str) -> np.ndarray:
    tokens = np.load(path, allow_pickle=False)
    if tokens.ndim == 2:
        tokens = tokens[None, :, :]
    if tokens.ndim != 3:
        raise ValidationError(
            f"token file must hold a (samples, tokens, dim) array, got shape {tokens.shape}"
        )
    return tokens.astype(np.float64)


def _write_json(payload: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True))
        fh.write("\n")


def _apply_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Fill unset (None) options from the JSON config file; flags win."""
    if not getattr(args, "config", None):
        return
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise FormatError("config file must hold a JSON object")
    for key, value in payload.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise UsageError(f"config file sets unknown option {key!r}")
        if getattr(args, attr) is None:
            setattr(args, attr, value)


def _require(args: argparse.Namespace, *names: str) -> None:
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"missing required option --{name.replace('_', '-')}")


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_gen_model(args) -> int:
    _require(args, "out")
    if args.fixture is not None:
        fixture = _load_fixture(args.fixture)
        model = fixture.model()
    else:
        _require(args, "layers", "experts", "top_k", "hidden_dim", "inner_dim")
        config = ModelConfig(
            num_layers=int(args.layers),
            num_experts=int(args.experts),
            top_k=int(args.top_k),
            hidden_dim=int(args.hidden_dim),
            expert_inner_dim=int(args.inner_dim),
            seed=int(args.seed if args.seed is not None else 0),
        )
        model = build_model(config)
    write_model(model, args.out)
    return EXIT_OK


def _cmd_gen_domain(args) -> int:
    _require(args, "out", "fixture", "domain")
    fixture = _load_fixture(args.fixture)
    samples = fixture.stream(
        args.domain,
        num_samples=int(args.samples) if args.samples is not None else None,
        tokens_per_sample=int(args.tokens) if args.tokens is not None else None,
        seed=int(args.seed) if args.seed is not None else None,
    )
    np.save(args.out, np.stack(samples), allow_pickle=False)
    return EXIT_OK


def _cmd_trace(args) -> int:
    _require(args, "out")
    if args.from_jsonl is not None:
        captured = trace_mod.read_trace_jsonl(args.from_jsonl)
    else:
        _require(args, "model", "tokens", "domain")
        model = read_model(args.model)
        tokens = _load_tokens(args.tokens)
        captured = trace_mod.capture_trace(
            model, list(tokens), args.domain, workers=args.workers
        )
    trace_mod.write_trace(captured, args.out)
    return EXIT_OK


def _cmd_score(args) -> int:
    _require(args, "method", "out")
    method = args.method
    if method == "mixed":
        if not args.tables or len(args.tables) < 1:
            raise UsageError("--method mixed requires --tables")
        tables = [scoring.read_score_table(p) for p in args.tables]
        table = scoring.score_mixed(tables)
    elif method == "random":
        _require(args, "dims_from", "seed")
        source = trace_mod.read_trace(args.dims_from)
        table = scoring.score_random(
            source.header.num_layers,
            source.header.num_experts,
            source.header.top_k,
            int(args.seed),
        )
    else:
        _require(args, "trace")
        captured = trace_mod.read_trace(args.trace)
        scorers = {
            "frequency": scoring.score_frequency,
            "gating": scoring.score_gating,
            "easy_ep": scoring.score_easy_ep,
        }
        if method not in scorers:
            raise UsageError(f"unknown scoring method {method!r}")
        table = scorers[method](captured, workers=args.workers)
    scoring.write_score_table(table, args.out)
    return EXIT_OK


def _cmd_plan(args) -> int:
    _require(args, "out")
    modes = [args.m is not None, args.ratio is not None, args.exclusive_domain is not None]
    if sum(modes) != 1:
        raise UsageError("choose exactly one of --m, --ratio, --exclusive-domain")
    if args.exclusive_domain is not None:
        if not args.tables or len(args.tables) < 2:
            raise UsageError("--exclusive-domain requires --tables with >= 2 tables")
        if args.exclusive_m is None:
            raise UsageError("--exclusive-domain requires --exclusive-m")
        tables = [scoring.read_score_table(p) for p in args.tables]
        exclusive = pruning.domain_exclusive_experts(tables, int(args.exclusive_m))
        if args.exclusive_domain not in exclusive:
            raise ValidationError(
                f"no table for domain {args.exclusive_domain!r}; "
                f"available: {sorted(exclusive)}"
            )
        first = tables[0]
        plan = pruning.plan_remove_set(
            first.num_layers,
            first.num_experts,
            first.top_k,
            exclusive[args.exclusive_domain],
            provenance={"removed_exclusive_of": args.exclusive_domain,
                        "m": int(args.exclusive_m)},
        )
    else:
        _require(args, "table")
        table = scoring.read_score_table(args.table)
        if args.m is not None:
            if int(args.m) < 1:
                raise UsageError(f"--m must be a positive integer, got {args.m}")
            plan = pruning.plan_top_m(table, int(args.m))
        else:
            plan = pruning.plan_layerwise_dynamic(table, float(args.ratio))
    pruning.write_plan(plan, args.out)
    return EXIT_OK


def _cmd_apply(args) -> int:
    _require(args, "model", "plan", "out")
    model = read_model(args.model)
    plan = pruning.read_plan(args.plan)
    write_model(pruning.apply_plan(model, plan), args.out)
    return EXIT_OK


def _cmd_overlap(args) -> int:
    _require(args, "out", "m")
    if not args.tables or len(args.tables) < 2:
        raise UsageError("--tables needs at least two score tables")
    tables = [scoring.read_score_table(p) for p in args.tables]
    m = int(args.m)
    labels = [analysis.table_label(t) for t in tables]
    pairs = []
    for i in range(len(tables)):
        for j in range(i + 1, len(tables)):
            report = analysis.overlap_top_m(tables[i], tables[j], m)
            pairs.append(
                {
                    "a": report.label_a,
                    "b": report.label_b,
                    "per_layer": list(report.per_layer),
                    "model_wide": report.model_wide,
                }
            )
    matrix = analysis.overlap_matrix(tables, m)
    _write_json(
        {"m": m, "labels": labels, "pairs": pairs, "matrix": matrix.tolist()},
        args.out,
    )
    return EXIT_OK


def _layer_inputs(model, tokens: np.ndarray, layer: int) -> list[np.ndarray]:
    flat = tokens.reshape(-1, tokens.shape[-1])
    return [per_layer[layer].hidden_in for per_layer in forward_sequence(model, flat)]


def _cmd_perturb(args) -> int:
    _require(args, "model", "tokens", "layer", "m", "strategy", "out")
    model = read_model(args.model)
    tokens = _load_tokens(args.tokens)
    layer = int(args.layer)
    calib = _layer_inputs(model, tokens, layer)
    if args.strategy.startswith("perturb_"):
        args.strategy = args.strategy[len("perturb_"):]
    if args.strategy == "exhaustive":
        cap = int(args.cap) if args.cap is not None else perturb.DEFAULT_EVALUATION_CAP
        result = perturb.exhaustive_search(model, layer, int(args.m), calib, cap=cap)
    elif args.strategy == "greedy":
        result = perturb.greedy_search(model, layer, int(args.m), calib, workers=args.workers)
    else:
        raise UsageError(f"unknown strategy {args.strategy!r}")
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(result.to_json())
        fh.write("\n")
    return EXIT_OK


def _cmd_audit(args) -> int:
    _require(args, "model", "tokens", "out")
    model = read_model(args.model)
    tokens = _load_tokens(args.tokens)
    flat = tokens.reshape(-1, tokens.shape[-1])
    report = analysis.bound_audit(model, list(flat))
    _write_json(
        {
            "violations": report.violations,
            "max_ratio": report.max_ratio,
            "checked": report.checked,
        },
        args.out,
    )
    return EXIT_OK


def _cmd_report(args) -> int:
    _require(args, "trace", "out", "m")
    os.makedirs(args.out, exist_ok=True)
    captured = trace_mod.read_trace(args.trace)
    manifest: dict = {"trace_domain": captured.header.domain, "files": []}

    def emit_csv(name: str, header: list[str], rows) -> None:
        path = os.path.join(args.out, name)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        manifest["files"].append(name)

    for layer in range(captured.header.num_layers):
        points = analysis.importance_scatter(captured, layer)
        emit_csv(
            f"scatter_layer{layer}.csv",
            ["expert", "gating_score", "mean_importance"],
            [[p.expert, repr(p.gating_score), repr(p.mean_importance)] for p in points],
        )

    sample = int(args.sample) if args.sample is not None else 0
    sim = analysis.similarity_map(captured, sample)
    emit_csv(
        f"similarity_sample{sample}.csv",
        ["token"] + [f"layer{l}" for l in range(sim.shape[1])],
        [[t] + [repr(float(v)) for v in sim[t]] for t in range(sim.shape[0])],
    )

    if args.tables and len(args.tables) >= 2:
        tables = [scoring.read_score_table(p) for p in args.tables]
        m = int(args.m)
        rows = []
        for i in range(len(tables)):
            for j in range(i + 1, len(tables)):
                report = analysis.overlap_top_m(tables[i], tables[j], m)
                for layer, value in enumerate(report.per_layer):
                    rows.append([report.label_a, report.label_b, layer, repr(value)])
                rows.append([report.label_a, report.label_b, "model_wide",
                             repr(report.model_wide)])
        emit_csv("overlap_pairs.csv", ["table_a", "table_b", "layer", "overlap"], rows)
        matrix = analysis.overlap_matrix(tables, m)
        labels = [analysis.table_label(t) for t in tables]
        emit_csv(
            "overlap_matrix.csv",
            ["table"] + labels,
            [[labels[i]] + [repr(float(v)) for v in matrix[i]] for i in range(len(labels))],
        )

    _write_json(manifest, os.path.join(args.out, "manifest.json"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None,
                     help="JSON file of option defaults; explicit flags win")
    sub.add_argument("--workers", type=int, default=None,
                     help=f"worker count (default: ${WORKERS_ENV} or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Expert-pruning laboratory for toy mixture-of-experts models.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-model", help="build a model file (random or fixture)")
    p.add_argument("--out", default=None, help="output model file (.moep)")
    p.add_argument("--fixture", default=None,
                   help="'default' or a fixture JSON path; builds the planted model")
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--experts", type=int, default=None)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--inner-dim", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    _add_common(p)
    p.set_defaults(handler=_cmd_gen_model)

    p = commands.add_parser("gen-domain", help="sample a domain token stream (.npy)")
    p.add_argument("--fixture", default=None, help="'default' or a fixture JSON path")
    p.add_argument("--domain", default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--tokens", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(handler=_cmd_gen_domain)

    p = commands.add_parser("trace", help="capture a trace, or convert JSON-Lines to binary")
    p.add_argument("--model", default=None, help="model file (.moep)")
    p.add_argument("--tokens", default=None, help="token stream (.npy)")
    p.add_argument("--domain", default=None)
    p.add_argument("--from-jsonl", default=None, help="convert this JSON-Lines trace instead")
    p.add_argument("--out", default=None, help="output trace file (.moet)")
    _add_common(p)
    p.set_defaults(handler=_cmd_trace)

    p = commands.add_parser("score", help="compute an expert score table")
    p.add_argument("--method", default=None,
                   choices=["random", "frequency", "gating", "easy_ep", "mixed"])
    p.add_argument("--trace", default=None, help="trace file (.moet or .jsonl)")
    p.add_argument("--tables", nargs="+", default=None,
                   help="input tables for --method mixed")
    p.add_argument("--dims-from", default=None,
                   help="trace whose dims to use for --method random")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(handler=_cmd_score)

    p = commands.add_parser("plan", help="turn a score table into a pruning plan")
    p.add_argument("--table", default=None)
    p.add_argument("--m", type=int, default=None, help="experts kept per layer")
    p.add_argument("--ratio", type=float, default=None,
                   help="global keep ratio, layer-wise dynamic budgets")
    p.add_argument("--tables", nargs="+", default=None,
                   help="per-domain tables for --exclusive-domain")
    p.add_argument("--exclusive-domain", default=None,
                   help="emit a plan removing this domain's exclusive experts")
    p.add_argument("--exclusive-m", type=int, default=None,
                   help="top-m set size used for exclusivity")
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(handler=_cmd_plan)

    p = commands.add_parser("apply", help="apply a pruning plan to a model file")
    p.add_argument("--model", default=None)
    p.add_argument("--plan", default=None)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(handler=_cmd_apply)

    p = commands.add_parser("overlap", help="top-m overlap between score tables")
    p.add_argument("--tables", nargs="+", default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(handler=_cmd_overlap)

    p = commands.add_parser("perturb", help="perturbation-based expert search on one layer")
    p.add_argument("--model", default=None)
    p.add_argument("--tokens", default=None)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--strategy", default=None,
                   choices=["exhaustive", "greedy", "perturb_exhaustive", "perturb_greedy"])
    p.add_argument("--cap", type=int, default=None,
                   help="refuse exhaustive runs needing more evaluations than this")
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(handler=_cmd_perturb)

    p = commands.add_parser("audit", help="output-norm bound audit over a token stream")
    p.add_argument("--model", default=None)
    p.add_argument("--tokens", default=None)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(handler=_cmd_audit)

    p = commands.add_parser("report", help="bundle overlap/scatter/similarity CSVs")
    p.add_argument("--trace", default=None)
    p.add_argument("--tables", nargs="+", default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--sample", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    _add_common(p)
    p.set_defaults(handler=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config_file(args, parser)
        return args.handler(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point
        kind, code = _error_kind(exc)
        print(f"moelab: error: kind={kind} detail={exc}", file=sys.stderr)
        return code


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
