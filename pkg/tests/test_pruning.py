"""Plan construction, set algebra, and plan application."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moelab import (
    ValidationError,
    apply_plan,
    build_model,
    domain_exclusive_experts,
    forward_sequence,
    model_to_bytes,
    plan_layerwise_dynamic,
    plan_remove_set,
    plan_top_m,
    read_plan,
    top_m_indices,
    write_plan,
)
from moelab.model import ModelConfig
from moelab.scoring import ExpertScoreTable


def table_of(rows, top_k=1, domain="d"):
    return ExpertScoreTable(method="gating", domain=domain, top_k=top_k,
                            scores=np.asarray(rows, dtype=np.float64))


class TestTopM:
    def test_keep_all(self):
        plan = plan_top_m(table_of([[1.0, 2.0, 3.0, 4.0]]), 4)
        assert plan.keep == ((0, 1, 2, 3),)

    def test_top2_with_tied_maxima(self):
        plan = plan_top_m(table_of([[5.0, 1.0, 9.0, 9.0]]), 2)
        assert plan.keep == ((2, 3),)

    def test_all_tied_takes_lowest_indices(self):
        plan = plan_top_m(table_of([[1.0, 1.0, 1.0, 1.0]]), 2)
        assert plan.keep == ((0, 1),)

    def test_m_out_of_range(self):
        table = table_of([[1.0, 2.0, 3.0, 4.0]], top_k=2)
        with pytest.raises(ValidationError):
            plan_top_m(table, 1)
        with pytest.raises(ValidationError):
            plan_top_m(table, 5)

    @settings(max_examples=60, deadline=None)
    @given(
        seed=st.integers(0, 2**32 - 1),
        m1=st.integers(1, 6),
        m2=st.integers(1, 6),
    )
    def test_monotone_containment(self, seed, m1, m2):
        if m1 > m2:
            m1, m2 = m2, m1
        scores = np.random.default_rng(seed).random((3, 6))
        table = table_of(scores)
        small = plan_top_m(table, m1)
        large = plan_top_m(table, m2)
        for a, b in zip(small.keep, large.keep):
            assert set(a) <= set(b)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), scale_exp=st.integers(-16, 16))
    def test_argsort_invariance_under_scaling(self, seed, scale_exp):
        scores = np.random.default_rng(seed).random((2, 5))
        table = table_of(scores)
        scaled = table_of(scores * 2.0**scale_exp)
        assert plan_top_m(table, 3).keep == plan_top_m(scaled, 3).keep


def dynamic_plan_oracle(scores: np.ndarray, top_k: int, ratio: float):
    """Brute-force reference: normalize, globally rank, take budget, top up."""
    num_layers, num_experts = scores.shape
    normalized = np.empty_like(scores, dtype=np.float64)
    for layer in range(num_layers):
        total = scores[layer].sum()
        normalized[layer] = (
            np.full(num_experts, 1.0 / num_experts) if total == 0 else scores[layer] / total
        )
    entries = sorted(
        ((layer, expert) for layer in range(num_layers) for expert in range(num_experts)),
        key=lambda le: (-normalized[le], le[1], le[0]),
    )
    budget = math.ceil(ratio * num_layers * num_experts)
    retained = set(entries[:budget])
    rank = {le: i for i, le in enumerate(entries)}
    counts = [sum(1 for le in retained if le[0] == layer) for layer in range(num_layers)]
    for layer in range(num_layers):
        while counts[layer] < top_k:
            missing = sorted(
                (e for e in range(num_experts) if (layer, e) not in retained),
                key=lambda e: (-normalized[layer, e], e),
            )
            promote = (layer, missing[0])
            evict = max(
                (le for le in retained if counts[le[0]] > top_k), key=lambda le: rank[le]
            )
            retained.remove(evict)
            counts[evict[0]] -= 1
            retained.add(promote)
            counts[layer] += 1
    return tuple(
        tuple(sorted(e for l2, e in retained if l2 == layer)) for layer in range(num_layers)
    )


class TestLayerwiseDynamic:
    def test_ratio_one_keeps_all(self):
        table = table_of([[1.0, 2.0], [3.0, 4.0]])
        plan = plan_layerwise_dynamic(table, 1.0)
        assert plan.keep == ((0, 1), (0, 1))

    def test_derived_example_matches_oracle(self):
        scores = np.array([[8.0, 1.0, 1.0, 0.0], [3.0, 3.0, 3.0, 1.0]])
        table = table_of(scores, top_k=1)
        plan = plan_layerwise_dynamic(table, 0.5)
        assert plan.keep == dynamic_plan_oracle(scores, 1, 0.5)
        # frozen value from the oracle: layer 0 keeps only its dominant
        # expert, layer 1 keeps its three tied leaders
        assert plan.keep == ((0,), (0, 1, 2))

    def test_uniform_scores_split_evenly(self):
        scores = np.ones((3, 4))
        plan = plan_layerwise_dynamic(table_of(scores, top_k=1), 0.5)
        assert plan.keep == ((0, 1), (0, 1), (0, 1))

    def test_infeasible_budget_rejected(self):
        table = table_of(np.ones((2, 8)), top_k=3)
        with pytest.raises(ValidationError):
            plan_layerwise_dynamic(table, 0.25)  # 4 experts for 2 layers of k=3

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1),
           ratio=st.sampled_from([0.375, 0.5, 0.625, 0.75, 1.0]))
    def test_matches_oracle_on_random_tables(self, seed, ratio):
        scores = np.random.default_rng(seed).random((3, 8)).round(2)
        table = table_of(scores, top_k=2)
        plan = plan_layerwise_dynamic(table, ratio)
        assert plan.keep == dynamic_plan_oracle(scores, 2, ratio)
        assert all(len(layer) >= 2 for layer in plan.keep)
        assert sum(len(layer) for layer in plan.keep) == math.ceil(ratio * 24)


class TestDomainExclusive:
    def test_identical_tables_have_empty_exclusive_sets(self):
        a = table_of([[4.0, 3.0, 2.0, 1.0]], domain="A")
        b = table_of([[4.0, 3.0, 2.0, 1.0]], domain="B")
        result = domain_exclusive_experts([a, b], 2)
        assert result["A"] == ((),)
        assert result["B"] == ((),)

    def test_disjoint_tops_are_fully_exclusive(self):
        a = table_of([[9.0, 8.0, 0.0, 0.0]], domain="A")
        b = table_of([[0.0, 0.0, 9.0, 8.0]], domain="B")
        result = domain_exclusive_experts([a, b], 2)
        assert result["A"] == ((0, 1),)
        assert result["B"] == ((2, 3),)

    def test_three_tables_match_set_algebra_oracle(self):
        rows = {
            "A": [[9.0, 8.0, 7.0, 1.0, 1.0, 0.0]],
            "B": [[9.0, 1.0, 7.0, 8.0, 0.0, 0.0]],
            "C": [[0.0, 8.0, 1.0, 9.0, 7.0, 0.0]],
        }
        tables = [table_of(rows[name], domain=name) for name in ("A", "B", "C")]
        result = domain_exclusive_experts(tables, 3)
        tops = {name: set(top_m_indices(np.array(rows[name][0]), 3)) for name in rows}
        for name in rows:
            others = set().union(*(tops[o] for o in rows if o != name))
            assert set(result[name][0]) == tops[name] - others
        # exclusive sets are pairwise disjoint by construction
        assert not (set(result["A"][0]) & set(result["B"][0]))
        assert not (set(result["A"][0]) & set(result["C"][0]))
        assert not (set(result["B"][0]) & set(result["C"][0]))

    def test_needs_two_tables(self):
        with pytest.raises(ValidationError):
            domain_exclusive_experts([table_of([[1.0, 2.0]])], 1)


class TestRemoveSet:
    def test_empty_removal_keeps_all(self):
        plan = plan_remove_set(2, 4, 1, remove=[[], []])
        assert plan.keep == ((0, 1, 2, 3), (0, 1, 2, 3))

    def test_complement(self):
        plan = plan_remove_set(1, 5, 2, remove=[[1, 3]])
        assert plan.keep == ((0, 2, 4),)

    def test_removing_too_many_rejected(self):
        with pytest.raises(ValidationError):
            plan_remove_set(1, 4, 2, remove=[[0, 1, 2]])


class TestApply:
    @pytest.fixture
    def model(self):
        return build_model(
            ModelConfig(num_layers=2, num_experts=6, top_k=2, hidden_dim=4,
                        expert_inner_dim=5, seed=13)
        )

    def test_keep_all_is_forward_identity(self, model, rng):
        table = table_of(np.ones((2, 6)), top_k=2)
        pruned = apply_plan(model, plan_top_m(table, 6))
        tokens = rng.standard_normal((10, 4))
        for ra, rb in zip(forward_sequence(model, tokens),
                          forward_sequence(pruned, tokens)):
            for la, lb in zip(ra, rb):
                assert np.array_equal(la.hidden_out, lb.hidden_out)

    def test_apply_is_idempotent(self, model):
        plan = plan_remove_set(2, 6, 2, remove=[[0, 5], [2]])
        once = apply_plan(model, plan)
        twice = apply_plan(once, plan)
        assert model_to_bytes(once) == model_to_bytes(twice)

    def test_apply_does_not_mutate_input(self, model):
        before = model_to_bytes(model)
        apply_plan(model, plan_remove_set(2, 6, 2, remove=[[0], []]))
        assert model_to_bytes(model) == before

    def test_removing_never_routed_expert_is_invisible(self, model, rng):
        tokens = rng.standard_normal((8, 4))
        baseline = forward_sequence(model, tokens)
        routed = {
            (li, int(e))
            for per_layer in baseline
            for li, rec in enumerate(per_layer)
            for e in rec.routing.experts
        }
        unused = [
            (li, e) for li in range(2) for e in range(6) if (li, e) not in routed
        ]
        assert unused
        remove = [[], []]
        remove[unused[0][0]] = [unused[0][1]]
        pruned = apply_plan(model, plan_remove_set(2, 6, 2, remove=remove))
        for ra, rb in zip(baseline, forward_sequence(pruned, tokens)):
            for la, lb in zip(ra, rb):
                assert np.array_equal(la.hidden_out, lb.hidden_out)

    def test_tokens_routed_inside_keep_set_unchanged(self, model, rng):
        tokens = rng.standard_normal((12, 4))
        baseline = forward_sequence(model, tokens)
        plan = plan_remove_set(2, 6, 2, remove=[[5], [0]])
        pruned = apply_plan(model, plan)
        kept = [set(layer) for layer in plan.keep]
        after = forward_sequence(pruned, tokens)
        for ra, rb in zip(baseline, after):
            inside = all(
                set(int(e) for e in rec.routing.experts) <= kept[li]
                for li, rec in enumerate(ra)
            )
            if inside:
                for la, lb in zip(ra, rb):
                    assert np.array_equal(la.hidden_out, lb.hidden_out)

    def test_plan_model_mismatch_rejected(self, model):
        plan = plan_remove_set(3, 6, 2, remove=[[], [], []])
        with pytest.raises(ValidationError):
            apply_plan(model, plan)

    def test_plan_leaving_too_few_available_rejected(self, model):
        # plan is valid on its own but the model has an expert already masked
        mask = model.expert_mask.copy()
        mask[0, 0] = False
        from moelab.model import MoeModel

        masked = MoeModel(config=model.config, layers=model.layers, expert_mask=mask)
        plan = plan_remove_set(2, 6, 2, remove=[[1, 2, 3, 4], []])
        with pytest.raises(ValidationError):
            apply_plan(masked, plan)


class TestPlanIO:
    def test_json_roundtrip(self, tmp_path):
        plan = plan_top_m(table_of([[5.0, 1.0, 9.0, 9.0]], top_k=2), 2)
        path = tmp_path / "p.json"
        write_plan(plan, path)
        loaded = read_plan(path)
        assert loaded.keep == plan.keep
        assert loaded.method == plan.method
        assert loaded.top_k == plan.top_k
        write_plan(loaded, path)
        first = path.read_bytes()
        write_plan(read_plan(path), path)
        assert path.read_bytes() == first
