"""Acceptance suite: one test per criterion, each at its stated tolerance.

The conftest terminal-summary hook prints one PASS/FAIL line per criterion
at the end of the run.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from conftest import build_handmade_trace, scalar_loop_scores
from moelab import (
    ChecksumError,
    VersionMismatchError,
    apply_plan,
    bound_audit,
    build_model,
    capture_trace,
    domain_exclusive_experts,
    exhaustive_search,
    forward_sequence,
    greedy_search,
    merge_traces,
    model_from_bytes,
    overlap_top_m,
    plan_remove_set,
    plan_top_m,
    read_model,
    read_trace,
    reconstruction_error,
    score_easy_ep,
    score_frequency,
    score_gating,
    score_mixed,
    score_random,
    top_m_indices,
    write_model,
    write_trace,
)
from moelab.errors import ValidationError
from moelab.model import ModelConfig
from moelab.scoring import ExpertScoreTable
from moelab.synthlab import load_default_fixture
from moelab.trace import trace_from_bytes, trace_to_bytes

DESK_CONFIG = ModelConfig(
    num_layers=4, num_experts=32, top_k=4, hidden_dim=16, expert_inner_dim=32, seed=1
)


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


def test_criterion_01_identity_pruning_bit_identical():
    with Timer() as timer:
        model = build_model(DESK_CONFIG)
        table = score_random(4, 32, 4, seed=9)
        pruned = apply_plan(model, plan_top_m(table, 32))
        tokens = np.random.default_rng(100).standard_normal((100, 16))
        full = forward_sequence(model, tokens)
        kept = forward_sequence(pruned, tokens)
        for per_full, per_kept in zip(full, kept):
            for rec_full, rec_kept in zip(per_full, per_kept):
                assert np.array_equal(rec_full.hidden_out, rec_kept.hidden_out)
                assert np.array_equal(rec_full.routing.experts, rec_kept.routing.experts)
                assert np.array_equal(rec_full.routing.gates, rec_kept.routing.gates)
    assert timer.elapsed < 1.0


def test_criterion_02_norm_bound_audit():
    with Timer() as timer:
        for seed in range(5):
            config = ModelConfig(num_layers=4, num_experts=32, top_k=4,
                                 hidden_dim=16, expert_inner_dim=32, seed=seed)
            model = build_model(config)
            tokens = np.random.default_rng(200 + seed).standard_normal((1000, 16))
            report = bound_audit(model, list(tokens))
            assert report.violations == 0
            assert report.checked == 4000
        k1 = ModelConfig(num_layers=2, num_experts=8, top_k=1, hidden_dim=8,
                         expert_inner_dim=8, seed=42)
        report = bound_audit(build_model(k1),
                             list(np.random.default_rng(7).standard_normal((500, 8))))
        assert report.violations == 0
        assert report.max_ratio == pytest.approx(1.0, abs=1e-9)
    assert timer.elapsed < 5.0


def test_criterion_03_scoring_oracle_equivalence():
    trace = build_handmade_trace()
    freq_ref, gating_ref, easy_ref = scalar_loop_scores(trace)
    assert np.array_equal(score_frequency(trace).scores, freq_ref)
    assert score_gating(trace).scores == pytest.approx(gating_ref, abs=1e-12)
    assert score_easy_ep(trace).scores == pytest.approx(easy_ref, abs=1e-12)

    config = ModelConfig(num_layers=2, num_experts=6, top_k=2, hidden_dim=4,
                         expert_inner_dim=5, seed=30)
    model = build_model(config)
    rng = np.random.default_rng(31)
    a = capture_trace(model, [rng.standard_normal((4, 4)) for _ in range(2)], "d")
    b = capture_trace(model, [rng.standard_normal((3, 4)) for _ in range(3)], "d")
    merged = merge_traces([a, b])
    assert np.array_equal(score_frequency(merged).scores,
                          score_frequency(a).scores + score_frequency(b).scores)
    for scorer in (score_gating, score_easy_ep):
        assert scorer(merged).scores == pytest.approx(
            scorer(a).scores + scorer(b).scores, rel=1e-9
        )


def test_criterion_04_mixed_domain_normalization():
    def table(rows, domain):
        return ExpertScoreTable(method="gating", domain=domain, top_k=1,
                                scores=np.asarray(rows, dtype=np.float64))

    hand = score_mixed([table([[2.0, 2.0]], "A"), table([[1.0, 3.0]], "B")])
    assert np.array_equal(hand.scores, [[0.75, 1.25]])

    rng = np.random.default_rng(8)
    tables = [table(rng.random((5, 7)), f"dom{i}") for i in range(3)]
    mixed = score_mixed(tables)
    assert mixed.scores.sum(axis=1) == pytest.approx(np.full(5, 3.0), abs=1e-9)


def test_criterion_05_fewshot_localization_on_fixture():
    with Timer() as timer:
        fixture = load_default_fixture()
        model = fixture.model()

        # planted recovery from 25 samples, per layer
        for domain in fixture.domains:
            trace = capture_trace(model, fixture.stream(domain.name), domain.name)
            table = score_easy_ep(trace)
            for layer, planted in enumerate(domain.planted):
                top = set(top_m_indices(table.scores[layer], len(planted)))
                recovery = len(top & set(planted)) / len(planted)
                assert recovery >= 0.9

        # shot-count stability: 5 versus 100 samples, top-16
        domain = fixture.domains[0]

        def table_for(num_samples, seed):
            stream = fixture.stream(domain.name, num_samples=num_samples, seed=seed)
            return score_easy_ep(capture_trace(model, stream, domain.name))

        base_seed = fixture.stream_seeds[domain.name]
        shot = overlap_top_m(table_for(5, base_seed), table_for(100, base_seed), 16)
        assert shot.model_wide >= 0.9

        # two independent 25-sample streams
        cross = overlap_top_m(table_for(25, 901), table_for(25, 902), 16)
        assert cross.model_wide >= 0.84
    assert timer.elapsed < 30.0


def test_criterion_06_domain_exclusive_removal():
    fixture = load_default_fixture()
    model = fixture.model()
    streams = {d.name: fixture.stream(d.name) for d in fixture.domains}
    tables = [
        score_easy_ep(capture_trace(model, streams[d.name], d.name))
        for d in fixture.domains
    ]
    exclusive = domain_exclusive_experts(tables, 8)
    plan = plan_remove_set(
        fixture.config.num_layers,
        fixture.config.num_experts,
        fixture.config.top_k,
        exclusive[fixture.domains[0].name],
    )
    pruned = apply_plan(model, plan)
    tokens_a = list(np.concatenate(streams[fixture.domains[0].name]))
    tokens_b = list(np.concatenate(streams[fixture.domains[1].name]))
    increase_a = reconstruction_error(model, pruned, tokens_a)
    increase_b = reconstruction_error(model, pruned, tokens_b)
    median_a = float(np.median(increase_a))
    median_b = float(np.median(increase_b))
    assert median_a >= 5.0 * median_b


def test_criterion_07_perturbation_search_accounting():
    config = ModelConfig(num_layers=1, num_experts=8, top_k=2, hidden_dim=6,
                         expert_inner_dim=10, seed=0)
    model = build_model(config)
    calib = list(np.random.default_rng(1000).standard_normal((6, 6)))
    exhaustive = exhaustive_search(model, 0, 4, calib)
    greedy = greedy_search(model, 0, 4, calib)
    assert exhaustive.evaluations_performed == 70
    assert greedy.evaluations_performed == 26

    for seed in range(20):
        seeded = build_model(
            ModelConfig(num_layers=1, num_experts=8, top_k=2, hidden_dim=6,
                        expert_inner_dim=10, seed=seed)
        )
        seeded_calib = list(np.random.default_rng(1000 + seed).standard_normal((6, 6)))
        ex = exhaustive_search(seeded, 0, 4, seeded_calib)
        gr = greedy_search(seeded, 0, 4, seeded_calib)
        assert ex.perturbation <= gr.perturbation + 1e-12

    huge = build_model(
        ModelConfig(num_layers=1, num_experts=256, top_k=8, hidden_dim=4,
                    expert_inner_dim=4, seed=0)
    )
    with pytest.raises(ValidationError) as excinfo:
        exhaustive_search(huge, 0, 128, [np.zeros(4)])
    count = math.comb(256, 128)
    assert count > 10**75
    assert str(count) in str(excinfo.value)


def test_criterion_08_worker_determinism():
    fixture = load_default_fixture()
    model = fixture.model()
    stream = fixture.stream("alpha", num_samples=8, tokens_per_sample=16)

    serial_trace = capture_trace(model, stream, "alpha", workers=1)
    parallel_trace = capture_trace(model, stream, "alpha", workers=4)
    assert trace_to_bytes(serial_trace) == trace_to_bytes(parallel_trace)

    assert np.array_equal(
        score_frequency(serial_trace, workers=1).scores,
        score_frequency(parallel_trace, workers=4).scores,
    )
    for scorer in (score_gating, score_easy_ep):
        serial = scorer(serial_trace, workers=1).scores
        parallel = scorer(parallel_trace, workers=4).scores
        assert parallel == pytest.approx(serial, rel=1e-9)

    small = build_model(
        ModelConfig(num_layers=1, num_experts=8, top_k=2, hidden_dim=6,
                    expert_inner_dim=10, seed=2)
    )
    calib = list(np.random.default_rng(5).standard_normal((5, 6)))
    serial_result = greedy_search(small, 0, 4, calib, workers=1)
    parallel_result = greedy_search(small, 0, 4, calib, workers=4)
    assert serial_result.keep == parallel_result.keep
    assert serial_result.evaluations_performed == parallel_result.evaluations_performed
    assert parallel_result.perturbation == pytest.approx(
        serial_result.perturbation, rel=1e-9
    )


def test_criterion_09_format_round_trips(tmp_path):
    model = build_model(DESK_CONFIG)
    model_path = tmp_path / "m.moep"
    write_model(model, model_path)
    first_model = model_path.read_bytes()
    write_model(read_model(model_path), model_path)
    assert model_path.read_bytes() == first_model

    stream = np.random.default_rng(3).standard_normal((3, 8, 16))
    trace = capture_trace(model, list(stream), "roundtrip")
    trace_path = tmp_path / "t.moet"
    write_trace(trace, trace_path)
    first_trace = trace_path.read_bytes()
    write_trace(read_trace(trace_path), trace_path)
    assert trace_path.read_bytes() == first_trace

    corrupt_model = bytearray(first_model)
    corrupt_model[100] ^= 0x01
    with pytest.raises(ChecksumError):
        model_from_bytes(bytes(corrupt_model))
    versioned_model = bytearray(first_model)
    versioned_model[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(VersionMismatchError):
        model_from_bytes(bytes(versioned_model))

    corrupt_trace = bytearray(first_trace)
    corrupt_trace[-16] ^= 0x01
    with pytest.raises(ChecksumError):
        trace_from_bytes(bytes(corrupt_trace))
    versioned_trace = bytearray(first_trace)
    versioned_trace[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(VersionMismatchError):
        trace_from_bytes(bytes(versioned_trace))

    assert ChecksumError is not VersionMismatchError
    assert not issubclass(ChecksumError, VersionMismatchError)
    assert not issubclass(VersionMismatchError, ChecksumError)
