"""Perturbation-driven expert selection at toy scale.

Both strategies score a candidate keep set by how far it moves the layer
output: the sum over calibration tokens of the squared L2 distance between
the layer output computed with only the keep set available and the full
model's layer output. Exhaustive search tries every m-subset; greedy search
grows the keep set one expert at a time. Every call of the single evaluation
routine is counted, and the counts follow closed forms:
C(N, m) for exhaustive and sum_{j=0}^{m-1} (N - j) for greedy.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .model import MoeModel, layer_forward, route
from .parallel import EvalCounter, ordered_map, resolve_workers

DEFAULT_EVALUATION_CAP = 10**6


@dataclass(frozen=True)
class SearchResult:
    layer: int
    keep: tuple[int, ...]
    perturbation: float
    evaluations_performed: int
    strategy: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "layer": self.layer,
                "keep": list(self.keep),
                "perturbation": self.perturbation,
                "evaluations_performed": self.evaluations_performed,
                "strategy": self.strategy,
            },
            sort_keys=True,
        )


def _restricted_mask_model(model: MoeModel, layer: int, keep: Sequence[int]) -> MoeModel:
    """A view of the model whose given layer only exposes `keep` experts.

    Weights are shared with the input model; only the mask row is replaced.
    """
    mask = model.expert_mask.copy()
    row = np.zeros(model.config.num_experts, dtype=bool)
    row[list(keep)] = True
    mask[layer] = model.expert_mask[layer] & row
    return MoeModel(config=model.config, layers=model.layers, expert_mask=mask)


def _full_layer_outputs(model: MoeModel, layer: int, calib: Sequence[np.ndarray]):
    return [layer_forward(model, layer, h).hidden_out for h in calib]


def _evaluate(
    model: MoeModel,
    layer: int,
    keep: Sequence[int],
    calib: Sequence[np.ndarray],
    full_outputs: Sequence[np.ndarray],
    counter: EvalCounter,
) -> float:
    counter.increment()
    restricted = _restricted_mask_model(model, layer, keep)
    total = 0.0
    for h, full_out in zip(calib, full_outputs):
        out = layer_forward(restricted, layer, h).hidden_out
        diff = out - full_out
        total += float(diff @ diff)
    return total


def _check_keep(model: MoeModel, layer: int, keep: Sequence[int]) -> tuple[int, ...]:
    cfg = model.config
    keep = tuple(sorted(set(int(e) for e in keep)))
    if len(keep) < cfg.top_k:
        raise ValidationError(
            f"keep set has {len(keep)} experts, need at least top_k={cfg.top_k}"
        )
    if keep and (keep[0] < 0 or keep[-1] >= cfg.num_experts):
        raise ValidationError(f"keep indices out of [0, {cfg.num_experts})")
    avail = set(int(e) for e in model.available_experts(layer))
    if not set(keep) <= avail:
        raise ValidationError("keep set includes experts masked off in the model")
    return keep


def subset_perturbation(
    model: MoeModel,
    layer: int,
    keep: Sequence[int],
    calib: Sequence[np.ndarray],
) -> float:
    """Squared layer-output drift of restricting the layer to `keep`.

    calib holds the layer's input vectors (the full model's stream at that
    layer). Zero whenever the keep set covers everything the full router
    selects on calib.
    """
    keep = _check_keep(model, layer, keep)
    calib = [np.asarray(h, dtype=np.float64) for h in calib]
    full_outputs = _full_layer_outputs(model, layer, calib)
    return _evaluate(model, layer, keep, calib, full_outputs, EvalCounter())


def exhaustive_search(
    model: MoeModel,
    layer: int,
    m: int,
    calib: Sequence[np.ndarray],
    cap: int = DEFAULT_EVALUATION_CAP,
) -> SearchResult:
    """Evaluate every m-subset of the layer's available experts.

    Refuses instances whose binomial(N, m) evaluation count exceeds `cap`.
    Ties resolve to the lexicographically smallest keep set.
    """
    avail = [int(e) for e in model.available_experts(layer)]
    n = len(avail)
    if not model.config.top_k <= m <= n:
        raise ValidationError(
            f"m must lie in [top_k={model.config.top_k}, available={n}], got {m}"
        )
    count = math.comb(n, m)
    if count > cap:
        raise ValidationError(
            f"exhaustive search over {n} experts keeping {m} requires {count} "
            f"evaluations, exceeding the cap of {cap}"
        )
    calib = [np.asarray(h, dtype=np.float64) for h in calib]
    full_outputs = _full_layer_outputs(model, layer, calib)
    counter = EvalCounter()
    best_keep: tuple[int, ...] | None = None
    best_value = math.inf
    # itertools.combinations yields subsets in lexicographic order, so a
    # strict improvement test keeps the lexicographically smallest minimizer
    for combo in itertools.combinations(avail, m):
        value = _evaluate(model, layer, combo, calib, full_outputs, counter)
        if value < best_value:
            best_value = value
            best_keep = combo
    assert best_keep is not None
    return SearchResult(
        layer=layer,
        keep=best_keep,
        perturbation=best_value,
        evaluations_performed=counter.value,
        strategy="exhaustive",
    )


def _gating_pad_order(
    model: MoeModel, layer: int, calib: Sequence[np.ndarray]
) -> list[int]:
    """Available experts ranked by total gate mass on calib, descending."""
    totals = np.zeros(model.config.num_experts, dtype=np.float64)
    for h in calib:
        outcome = route(model, layer, h)
        for e, g in zip(outcome.experts, outcome.gates):
            totals[int(e)] += float(g)
    avail = [int(e) for e in model.available_experts(layer)]
    return sorted(avail, key=lambda e: (-totals[e], e))


def greedy_search(
    model: MoeModel,
    layer: int,
    m: int,
    calib: Sequence[np.ndarray],
    workers: int | None = None,
) -> SearchResult:
    """Grow the keep set one expert at a time, minimizing perturbation.

    While the grown set is still smaller than top_k, candidate sets are
    padded (for evaluation only) with the highest-gating remaining experts
    so routing is defined. Candidate evaluations within one step may run in
    parallel; the per-step argmin takes the lowest candidate index on ties.
    """
    workers = resolve_workers(workers)
    avail = [int(e) for e in model.available_experts(layer)]
    n = len(avail)
    k = model.config.top_k
    if not k <= m <= n:
        raise ValidationError(f"m must lie in [top_k={k}, available={n}], got {m}")
    calib = [np.asarray(h, dtype=np.float64) for h in calib]
    full_outputs = _full_layer_outputs(model, layer, calib)
    pad_order = _gating_pad_order(model, layer, calib)
    counter = EvalCounter()

    keep: list[int] = []
    last_value = math.inf
    for _ in range(m):
        candidates = [e for e in avail if e not in keep]

        def eval_candidate(candidate: int) -> float:
            trial = keep + [candidate]
            if len(trial) < k:
                padding = [e for e in pad_order if e not in trial]
                trial = trial + padding[: k - len(trial)]
            return _evaluate(model, layer, trial, calib, full_outputs, counter)

        values = ordered_map(eval_candidate, candidates, workers)
        best_index = min(range(len(candidates)), key=lambda i: (values[i], candidates[i]))
        keep.append(candidates[best_index])
        last_value = values[best_index]

    return SearchResult(
        layer=layer,
        keep=tuple(sorted(keep)),
        perturbation=last_value,
        evaluations_performed=counter.value,
        strategy="greedy",
    )
