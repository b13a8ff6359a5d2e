"""Pruning plans: which experts each layer keeps, and how to apply that.

Plan constructors are pure functions over score tables; ``apply_plan``
returns a new model whose mask excludes everything outside the keep sets
(pruned experts' weights are zeroed in memory and dropped from
serialization). Routing on an applied model recomputes top-K among the
surviving experts and renormalizes their gates by softmax.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .model import LayerWeights, MoeModel
from .scoring import ExpertScoreTable

PLAN_FORMAT = "moelab-pruning-plan"
PLAN_VERSION = 1


def top_m_indices(scores: np.ndarray, m: int) -> tuple[int, ...]:
    """Indices of the m largest scores, ties resolved toward the lower index."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return tuple(sorted(int(i) for i in order[:m]))


@dataclass
class PruningPlan:
    """Per-layer sorted keep sets plus provenance."""

    keep: tuple[tuple[int, ...], ...]
    num_experts: int
    top_k: int
    method: str
    target: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.keep)

    def __post_init__(self) -> None:
        self.keep = tuple(tuple(sorted(int(i) for i in layer)) for layer in self.keep)
        for li, layer in enumerate(self.keep):
            if len(set(layer)) != len(layer):
                raise ValidationError(f"layer {li} keep set has duplicates")
            if len(layer) < self.top_k:
                raise ValidationError(
                    f"layer {li} keeps {len(layer)} experts, fewer than top_k={self.top_k}"
                )
            if layer and (layer[0] < 0 or layer[-1] >= self.num_experts):
                raise ValidationError(f"layer {li} keep indices out of [0, {self.num_experts})")


def plan_top_m(table: ExpertScoreTable, m: int) -> PruningPlan:
    """Keep the m highest-scoring experts at every layer."""
    if not table.top_k <= m <= table.num_experts:
        raise ValidationError(
            f"m must lie in [top_k={table.top_k}, num_experts={table.num_experts}], got {m}"
        )
    keep = tuple(top_m_indices(table.scores[layer], m) for layer in range(table.num_layers))
    return PruningPlan(
        keep=keep,
        num_experts=table.num_experts,
        top_k=table.top_k,
        method="top_m",
        target={"m": m},
        provenance={"table_method": table.method, "domain": table.domain,
                    **table.provenance},
    )


def plan_layerwise_dynamic(table: ExpertScoreTable, global_ratio: float) -> PruningPlan:
    """Rank all experts globally by per-layer-normalized score; keep the top share.

    The budget is ceil(ratio * L * N) experts. Any layer left with fewer than
    top_k experts is topped up with its next-best experts, evicting the
    globally lowest-ranked retained experts from layers that can spare them.
    """
    if not 0 < global_ratio <= 1:
        raise ValidationError(f"global_ratio must lie in (0, 1], got {global_ratio}")
    num_layers, num_experts = table.scores.shape
    k = table.top_k
    budget = math.ceil(global_ratio * num_layers * num_experts)
    if budget < num_layers * k:
        raise ValidationError(
            f"infeasible budget: ratio {global_ratio} yields {budget} experts, "
            f"need at least {num_layers * k}"
        )
    normalized = np.empty_like(table.scores)
    for layer in range(num_layers):
        total = table.scores[layer].sum()
        if total == 0.0:
            normalized[layer] = 1.0 / num_experts
        else:
            normalized[layer] = table.scores[layer] / total

    entries = [
        (layer, expert) for layer in range(num_layers) for expert in range(num_experts)
    ]
    # index-major tie-break spreads tied scores evenly across layers
    entries.sort(key=lambda le: (-normalized[le[0], le[1]], le[1], le[0]))
    rank_of = {le: rank for rank, le in enumerate(entries)}
    retained = set(entries[:budget])

    counts = [0] * num_layers
    for layer, _ in retained:
        counts[layer] += 1
    for layer in range(num_layers):
        while counts[layer] < k:
            candidates = [
                e for e in range(num_experts) if (layer, e) not in retained
            ]
            candidates.sort(key=lambda e: (-normalized[layer, e], e))
            promote = (layer, candidates[0])
            evictable = [
                le for le in retained if counts[le[0]] > k
            ]
            evict = max(evictable, key=lambda le: rank_of[le])
            retained.remove(evict)
            counts[evict[0]] -= 1
            retained.add(promote)
            counts[layer] += 1

    keep = tuple(
        tuple(sorted(e for layer2, e in retained if layer2 == layer))
        for layer in range(num_layers)
    )
    return PruningPlan(
        keep=keep,
        num_experts=num_experts,
        top_k=k,
        method="layerwise_dynamic",
        target={"ratio": global_ratio, "budget": budget},
        provenance={"table_method": table.method, "domain": table.domain,
                    **table.provenance},
    )


def domain_exclusive_experts(
    tables: Sequence[ExpertScoreTable], m: int
) -> dict[str, tuple[tuple[int, ...], ...]]:
    """Per domain, the experts in its own top-m but no other domain's top-m."""
    if len(tables) < 2:
        raise ValidationError("need at least two domain tables")
    first = tables[0]
    for t in tables[1:]:
        if t.scores.shape != first.scores.shape:
            raise ValidationError("score tables disagree on dimensions")
    if not first.top_k <= m <= first.num_experts:
        raise ValidationError(
            f"m must lie in [top_k={first.top_k}, num_experts={first.num_experts}], got {m}"
        )
    top_sets = [
        [set(top_m_indices(t.scores[layer], m)) for layer in range(t.num_layers)]
        for t in tables
    ]
    result: dict[str, tuple[tuple[int, ...], ...]] = {}
    for ti, t in enumerate(tables):
        per_layer = []
        for layer in range(t.num_layers):
            others: set[int] = set()
            for tj in range(len(tables)):
                if tj != ti:
                    others |= top_sets[tj][layer]
            per_layer.append(tuple(sorted(top_sets[ti][layer] - others)))
        name = str(t.domain)
        result[name] = tuple(per_layer)
    return result


def plan_remove_set(
    num_layers: int,
    num_experts: int,
    top_k: int,
    remove: Sequence[Sequence[int]],
    provenance: dict | None = None,
) -> PruningPlan:
    """Keep the complement of the given per-layer removal sets."""
    if len(remove) != num_layers:
        raise ValidationError(
            f"remove has {len(remove)} layers, expected {num_layers}"
        )
    keep = []
    for li, removed in enumerate(remove):
        removed_set = set(int(e) for e in removed)
        if removed_set and (min(removed_set) < 0 or max(removed_set) >= num_experts):
            raise ValidationError(f"layer {li} removal indices out of range")
        kept = tuple(sorted(set(range(num_experts)) - removed_set))
        if len(kept) < top_k:
            raise ValidationError(
                f"layer {li} would keep {len(kept)} experts, fewer than top_k={top_k}"
            )
        keep.append(kept)
    return PruningPlan(
        keep=tuple(keep),
        num_experts=num_experts,
        top_k=top_k,
        method="remove_set",
        target={},
        provenance=provenance or {},
    )


def apply_plan(model: MoeModel, plan: PruningPlan) -> MoeModel:
    """Return a new model whose mask is false outside the plan's keep sets.

    The input model is never mutated. Masked experts' weights are zeroed so
    equal plans yield byte-identical models, and serialization drops them.
    """
    cfg = model.config
    if plan.num_layers != cfg.num_layers or plan.num_experts != cfg.num_experts:
        raise ValidationError(
            f"plan dims ({plan.num_layers} layers, {plan.num_experts} experts) "
            f"do not match model ({cfg.num_layers}, {cfg.num_experts})"
        )
    if plan.top_k != cfg.top_k:
        raise ValidationError(
            f"plan top_k={plan.top_k} does not match model top_k={cfg.top_k}"
        )
    keep_mask = np.zeros((cfg.num_layers, cfg.num_experts), dtype=bool)
    for li, layer_keep in enumerate(plan.keep):
        keep_mask[li, list(layer_keep)] = True
    new_mask = model.expert_mask & keep_mask
    available = new_mask.sum(axis=1)
    if (available < cfg.top_k).any():
        bad = int(np.argmin(available))
        raise ValidationError(
            f"plan leaves layer {bad} with {int(available[bad])} available experts, "
            f"fewer than top_k={cfg.top_k}"
        )
    layers = []
    for li, lw in enumerate(model.layers):
        w1 = lw.w1.copy()
        w2 = lw.w2.copy()
        dropped = ~new_mask[li]
        w1[dropped] = 0.0
        w2[dropped] = 0.0
        layers.append(LayerWeights(router=lw.router.copy(), w1=w1, w2=w2))
    return MoeModel(config=cfg, layers=tuple(layers), expert_mask=new_mask)


# ---------------------------------------------------------------------------
# JSON serialization


def plan_to_json(plan: PruningPlan) -> str:
    payload = {
        "format": PLAN_FORMAT,
        "version": PLAN_VERSION,
        "dims": {
            "num_layers": plan.num_layers,
            "num_experts": plan.num_experts,
            "top_k": plan.top_k,
        },
        "method": plan.method,
        "target": plan.target,
        "provenance": plan.provenance,
        "keep": [list(layer) for layer in plan.keep],
    }
    return json.dumps(payload, sort_keys=True)


def plan_from_json(text: str) -> PruningPlan:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"pruning plan is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != PLAN_FORMAT:
        raise FormatError("not a pruning-plan JSON document")
    if payload.get("version") != PLAN_VERSION:
        raise FormatError(f"unsupported pruning-plan version {payload.get('version')}")
    dims = payload["dims"]
    return PruningPlan(
        keep=tuple(tuple(layer) for layer in payload["keep"]),
        num_experts=int(dims["num_experts"]),
        top_k=int(dims["top_k"]),
        method=payload.get("method", "unknown"),
        target=payload.get("target", {}),
        provenance=payload.get("provenance", {}),
    )


def write_plan(plan: PruningPlan, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(plan_to_json(plan))
        fh.write("\n")


def read_plan(path) -> PruningPlan:
    with open(path, "r", encoding="utf-8") as fh:
        return plan_from_json(fh.read())
