"""Per-expert importance scores computed from calibration traces.

Four trace-driven methods plus seeded random scores:

* ``frequency``: how many records activate the expert.
* ``gating``: total gate mass the expert receives.
* ``easy_ep``: sum of gate * output-norm * token-contribution over every
  activation, weighting each token by how much the routed experts move it.
* ``mixed``: per-layer-normalized single-domain tables summed across domains.

All float accumulation runs in float64 over records in (sample, token,
layer) order; worker shards are contiguous record ranges whose partial
tables are added in ascending shard index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .parallel import resolve_workers, shard_slices, ordered_map
from .trace import TraceFile

METHODS = ("random", "frequency", "gating", "easy_ep", "mixed")

SCORE_TABLE_FORMAT = "moelab-score-table"
SCORE_TABLE_VERSION = 1

# Optional hook to exclude records (e.g. special tokens) from the sums.
# Receives (sample_ids, token_ids) and returns a boolean keep-mask.
RecordFilter = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class ExpertScoreTable:
    """Per-layer, per-expert scores for one method and one domain (or set)."""

    method: str
    domain: str | tuple[str, ...]
    top_k: int
    scores: np.ndarray  # (L, N) float64, finite and nonnegative
    provenance: dict = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return int(self.scores.shape[0])

    @property
    def num_experts(self) -> int:
        return int(self.scores.shape[1])

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValidationError(f"unknown scoring method {self.method!r}")
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValidationError("scores must be a layers x experts matrix")
        if not np.isfinite(self.scores).all():
            raise ValidationError("scores must be finite")
        if (self.scores < 0).any():
            raise ValidationError("scores must be nonnegative")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValidationError("table top_k must lie in [1, num_experts]")


def _same_dims(tables: Sequence[ExpertScoreTable]) -> None:
    first = tables[0]
    for t in tables[1:]:
        if t.scores.shape != first.scores.shape or t.top_k != first.top_k:
            raise ValidationError("score tables disagree on dimensions")


def _apply_filter(trace: TraceFile, record_filter: RecordFilter | None) -> np.ndarray | None:
    if record_filter is None:
        return None
    keep = np.asarray(record_filter(trace.sample_ids, trace.token_ids), dtype=bool)
    if keep.shape != (trace.num_records,):
        raise ValidationError("record filter must return one boolean per record")
    return keep


def _accumulate(
    trace: TraceFile,
    weights_for: Callable[[slice], np.ndarray],
    workers: int,
    keep: np.ndarray | None,
) -> np.ndarray:
    """Sum per-activation weights into an (L, N) table, shard by shard."""
    hdr = trace.header
    shape = (hdr.num_layers, hdr.num_experts)

    def one_shard(sl: slice) -> np.ndarray:
        table = np.zeros(shape, dtype=np.float64)
        layers = trace.layers[sl]
        experts = trace.experts[sl]
        weights = weights_for(sl)
        if keep is not None:
            mask = keep[sl]
            layers, experts, weights = layers[mask], experts[mask], weights[mask]
        k = experts.shape[1]
        flat_layers = np.repeat(layers.astype(np.int64), k)
        # np.add.at applies updates sequentially in index order, matching a
        # scalar loop over records and activations
        np.add.at(table, (flat_layers, experts.reshape(-1).astype(np.int64)),
                  weights.reshape(-1))
        return table

    parts = ordered_map(one_shard, shard_slices(trace.num_records, workers), workers)
    if not parts:
        return np.zeros(shape, dtype=np.float64)
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total


def _trace_provenance(trace: TraceFile) -> dict:
    return {
        "fingerprints": [trace.header.fingerprint],
        "num_samples": trace.header.num_samples,
        "num_tokens": trace.header.num_tokens,
    }


def score_frequency(
    trace: TraceFile,
    workers: int | None = None,
    record_filter: RecordFilter | None = None,
) -> ExpertScoreTable:
    """Count how many records activate each expert at each layer."""
    workers = resolve_workers(workers)
    keep = _apply_filter(trace, record_filter)
    scores = _accumulate(
        trace, lambda sl: np.ones_like(trace.gates[sl], dtype=np.float64), workers, keep
    )
    return ExpertScoreTable(
        method="frequency",
        domain=trace.header.domain,
        top_k=trace.header.top_k,
        scores=scores,
        provenance=_trace_provenance(trace),
    )


def score_gating(
    trace: TraceFile,
    workers: int | None = None,
    record_filter: RecordFilter | None = None,
) -> ExpertScoreTable:
    """Sum each expert's gate values over all records."""
    workers = resolve_workers(workers)
    keep = _apply_filter(trace, record_filter)
    scores = _accumulate(
        trace, lambda sl: trace.gates[sl].astype(np.float64), workers, keep
    )
    return ExpertScoreTable(
        method="gating",
        domain=trace.header.domain,
        top_k=trace.header.top_k,
        scores=scores,
        provenance=_trace_provenance(trace),
    )


def expert_importance_term(gate: float, out_norm: float) -> float:
    """Per-token importance of one activated expert: gate times output norm."""
    if not gate > 0:
        raise ValidationError(f"gate must be positive, got {gate}")
    if out_norm < 0:
        raise ValidationError(f"out_norm must be nonnegative, got {out_norm}")
    return gate * out_norm


def score_easy_ep(
    trace: TraceFile,
    workers: int | None = None,
    record_filter: RecordFilter | None = None,
) -> ExpertScoreTable:
    """Sum gate * out_norm * token-contribution over every activation.

    The sum runs over every token of every calibration sample; there is no
    per-token averaging.
    """
    workers = resolve_workers(workers)
    keep = _apply_filter(trace, record_filter)

    def weights_for(sl: slice) -> np.ndarray:
        g = trace.gates[sl].astype(np.float64)
        n = trace.out_norms[sl].astype(np.float64)
        s = trace.contributions[sl].astype(np.float64)
        return (g * n) * s[:, None]

    scores = _accumulate(trace, weights_for, workers, keep)
    return ExpertScoreTable(
        method="easy_ep",
        domain=trace.header.domain,
        top_k=trace.header.top_k,
        scores=scores,
        provenance=_trace_provenance(trace),
    )


def score_random(
    num_layers: int, num_experts: int, top_k: int, seed: int
) -> ExpertScoreTable:
    """Seeded uniform scores in [0, 1); a pruning baseline."""
    rng = np.random.default_rng(seed)
    scores = rng.random((num_layers, num_experts))
    return ExpertScoreTable(
        method="random",
        domain="",
        top_k=top_k,
        scores=scores,
        provenance={"seed": seed},
    )


def score_mixed(tables: Sequence[ExpertScoreTable]) -> ExpertScoreTable:
    """Combine single-domain tables: normalize each layer to sum 1, then add.

    A domain whose scores sum to zero at some layer contributes a uniform
    1/N row there; the event is recorded in the result's provenance
    warnings.
    """
    if not tables:
        raise ValidationError("score_mixed needs at least one table")
    _same_dims(tables)
    for t in tables:
        if t.method == "mixed":
            raise ValidationError("score_mixed input tables must be single-domain")
    num_layers, num_experts = tables[0].scores.shape
    mixed = np.zeros((num_layers, num_experts), dtype=np.float64)
    warnings: list[str] = []
    for t in tables:
        for layer in range(num_layers):
            row = t.scores[layer]
            total = row.sum()
            if total == 0.0:
                warnings.append(
                    f"domain {t.domain!r} layer {layer} has zero total score; "
                    f"using uniform 1/{num_experts}"
                )
                mixed[layer] += 1.0 / num_experts
            else:
                mixed[layer] += row / total
    fingerprints: list[int] = []
    for t in tables:
        fingerprints.extend(t.provenance.get("fingerprints", []))
    domains = tuple(str(t.domain) for t in tables)
    return ExpertScoreTable(
        method="mixed",
        domain=domains,
        top_k=tables[0].top_k,
        scores=mixed,
        provenance={"fingerprints": fingerprints, "warnings": warnings},
    )


# ---------------------------------------------------------------------------
# JSON serialization


def score_table_to_json(table: ExpertScoreTable) -> str:
    payload = {
        "format": SCORE_TABLE_FORMAT,
        "version": SCORE_TABLE_VERSION,
        "method": table.method,
        "domain": list(table.domain) if isinstance(table.domain, tuple) else table.domain,
        "dims": {
            "num_layers": table.num_layers,
            "num_experts": table.num_experts,
            "top_k": table.top_k,
        },
        "provenance": table.provenance,
        "scores": [[float(v) for v in row] for row in table.scores],
    }
    return json.dumps(payload, sort_keys=True)


def score_table_from_json(text: str) -> ExpertScoreTable:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"score table is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != SCORE_TABLE_FORMAT:
        raise FormatError("not a score-table JSON document")
    if payload.get("version") != SCORE_TABLE_VERSION:
        raise FormatError(f"unsupported score-table version {payload.get('version')}")
    domain = payload["domain"]
    if isinstance(domain, list):
        domain = tuple(domain)
    return ExpertScoreTable(
        method=payload["method"],
        domain=domain,
        top_k=int(payload["dims"]["top_k"]),
        scores=np.asarray(payload["scores"], dtype=np.float64),
        provenance=payload.get("provenance", {}),
    )


def write_score_table(table: ExpertScoreTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(score_table_to_json(table))
        fh.write("\n")


def read_score_table(path) -> ExpertScoreTable:
    with open(path, "r", encoding="utf-8") as fh:
        return score_table_from_json(fh.read())
