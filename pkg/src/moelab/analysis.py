"""Diagnostics over models, traces, and score tables.

Covers top-M overlap between score tables, the gating-times-norm output
bound audit, the gating-vs-importance scatter, the per-token contribution
map, and per-layer reconstruction error of a pruned model against the full
one. Everything here is a pure function emitting plain data; CSV and JSON
rendering live in the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ValidationError
from .model import MoeModel, forward_sequence, layer_forward
from .pruning import top_m_indices
from .scoring import ExpertScoreTable
from .trace import TraceFile

BOUND_RELATIVE_TOLERANCE = 1e-6
_ZERO = 1e-12


@dataclass(frozen=True)
class OverlapReport:
    """Top-m agreement between two score tables, per layer and model-wide."""

    label_a: str
    label_b: str
    m: int
    per_layer: tuple[float, ...]

    @property
    def model_wide(self) -> float:
        return float(np.mean(self.per_layer))


def table_label(table: ExpertScoreTable) -> str:
    domain = table.domain
    if isinstance(domain, tuple):
        domain = "+".join(domain)
    return f"{table.method}:{domain}" if domain else table.method


def overlap_top_m(a: ExpertScoreTable, b: ExpertScoreTable, m: int) -> OverlapReport:
    """Per-layer |top_m(a) intersect top_m(b)| / m, plus the unweighted mean."""
    if a.scores.shape != b.scores.shape:
        raise ValidationError("score tables disagree on dimensions")
    if not a.top_k <= m <= a.num_experts:
        raise ValidationError(
            f"m must lie in [top_k={a.top_k}, num_experts={a.num_experts}], got {m}"
        )
    per_layer = []
    for layer in range(a.num_layers):
        set_a = set(top_m_indices(a.scores[layer], m))
        set_b = set(top_m_indices(b.scores[layer], m))
        per_layer.append(len(set_a & set_b) / m)
    return OverlapReport(
        label_a=table_label(a), label_b=table_label(b), m=m, per_layer=tuple(per_layer)
    )


def overlap_matrix(tables: Sequence[ExpertScoreTable], m: int) -> np.ndarray:
    """Symmetric matrix of model-wide overlaps between all table pairs."""
    if len(tables) < 2:
        raise ValidationError("need at least two tables")
    count = len(tables)
    matrix = np.eye(count, dtype=np.float64)
    for i in range(count):
        for j in range(i + 1, count):
            value = overlap_top_m(tables[i], tables[j], m).model_wide
            matrix[i, j] = value
            matrix[j, i] = value
    return matrix


class BoundAuditReport(NamedTuple):
    violations: int
    max_ratio: float
    checked: int


def bound_audit(model: MoeModel, tokens: Sequence[np.ndarray]) -> BoundAuditReport:
    """Check ||routed_sum|| <= sum(gate * ||expert output||) on every (token, layer).

    The inequality is a triangle-inequality fact, so any violation beyond
    float tolerance indicates a numerics bug. When both sides are below
    1e-12 the ratio counts as exactly 1 (vacuous equality).
    """
    tokens = list(tokens)
    if not tokens:
        raise ValidationError("bound_audit needs at least one token")
    violations = 0
    max_ratio = 0.0
    checked = 0
    for per_layer in forward_sequence(model, tokens):
        for record in per_layer:
            lhs = float(np.linalg.norm(record.routed_sum))
            rhs = float(record.routing.gates @ record.expert_output_norms)
            checked += 1
            if rhs < _ZERO and lhs < _ZERO:
                ratio = 1.0
            else:
                ratio = lhs / rhs if rhs > 0 else float("inf")
            max_ratio = max(max_ratio, ratio)
            if lhs > rhs + BOUND_RELATIVE_TOLERANCE * (1.0 + rhs):
                violations += 1
    return BoundAuditReport(violations=violations, max_ratio=max_ratio, checked=checked)


class ScatterPoint(NamedTuple):
    expert: int
    gating_score: float
    mean_importance: float  # mean of gate * out_norm over the expert's activations


def importance_scatter(trace: TraceFile, layer: int) -> list[ScatterPoint]:
    """Per activated expert at one layer: total gate mass vs mean gate*norm.

    Experts never activated at the layer are omitted.
    """
    if not 0 <= layer < trace.header.num_layers:
        raise ValidationError(f"layer {layer} out of range")
    mask = trace.layers == layer
    experts = trace.experts[mask].reshape(-1)
    gates = trace.gates[mask].reshape(-1).astype(np.float64)
    norms = trace.out_norms[mask].reshape(-1).astype(np.float64)
    n = trace.header.num_experts
    gate_totals = np.zeros(n)
    importance_totals = np.zeros(n)
    counts = np.zeros(n, dtype=np.int64)
    np.add.at(gate_totals, experts, gates)
    np.add.at(importance_totals, experts, gates * norms)
    np.add.at(counts, experts, 1)
    points = []
    for expert in range(n):
        if counts[expert] > 0:
            points.append(
                ScatterPoint(
                    expert=expert,
                    gating_score=float(gate_totals[expert]),
                    mean_importance=float(importance_totals[expert] / counts[expert]),
                )
            )
    return points


def similarity_map(trace: TraceFile, sample_id: int) -> np.ndarray:
    """The stored token-contribution values of one sample as a (T, L) matrix."""
    if not 0 <= sample_id < trace.header.num_samples:
        raise ValidationError(f"unknown sample id {sample_id}")
    t_n = trace.header.tokens_per_sample[sample_id]
    num_layers = trace.header.num_layers
    out = np.full((t_n, num_layers), np.nan, dtype=np.float64)
    mask = trace.sample_ids == sample_id
    tokens = trace.token_ids[mask].astype(np.int64)
    layers = trace.layers[mask].astype(np.int64)
    out[tokens, layers] = trace.contributions[mask].astype(np.float64)
    if np.isnan(out).any():
        raise ValidationError(f"sample {sample_id} is missing records")
    return out


def reconstruction_error(
    full: MoeModel, pruned: MoeModel, tokens: Sequence[np.ndarray]
) -> np.ndarray:
    """Per-layer mean squared drift of the layer output under pruning.

    Layer l of the pruned model is fed the FULL model's layer-l inputs, so
    each layer is assessed independently rather than compounding drift.
    """
    if full.config.num_layers != pruned.config.num_layers or (
        full.config.hidden_dim != pruned.config.hidden_dim
    ):
        raise ValidationError("models disagree on dimensions")
    tokens = list(tokens)
    if not tokens:
        raise ValidationError("reconstruction_error needs at least one token")
    num_layers = full.config.num_layers
    totals = np.zeros(num_layers, dtype=np.float64)
    for per_layer in forward_sequence(full, tokens):
        for layer_index, record in enumerate(per_layer):
            pruned_out = layer_forward(pruned, layer_index, record.hidden_in).hidden_out
            diff = pruned_out - record.hidden_out
            totals[layer_index] += float(diff @ diff)
    return totals / len(tokens)
