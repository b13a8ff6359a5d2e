"""Shared fixtures and the acceptance-suite summary hook."""

from __future__ import annotations

import numpy as np
import pytest

from moelab import ModelConfig, build_model, make_trace

# one pass/fail line per acceptance criterion at the end of the run
_ACCEPTANCE_PREFIX = "test_acceptance.py"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if _ACCEPTANCE_PREFIX in str(getattr(report, "nodeid", "")):
                name = report.nodeid.split("::")[-1]
                status = "PASS" if outcome == "passed" else "FAIL"
                lines.append(f"ACCEPTANCE {status} {name}")
    if lines:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        num_layers=2, num_experts=8, top_k=2, hidden_dim=4, expert_inner_dim=8, seed=7
    )


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# handmade three-sample trace used by the scoring oracle tests
HANDMADE_RECORDS = [
    (0, 0, 0, [(1, 0.7, 2.0), (3, 0.3, 1.0)], 0.5),
    (0, 0, 1, [(0, 0.6, 1.5), (2, 0.4, 0.5)], 0.25),
    (1, 0, 0, [(1, 0.6, 3.0), (2, 0.4, 2.0)], 1.0),
    (1, 0, 1, [(2, 0.9, 1.0), (3, 0.1, 4.0)], 0.75),
    (1, 1, 0, [(0, 0.5, 1.0), (1, 0.5, 1.0)], 0.0),
    (1, 1, 1, [(0, 0.8, 2.5), (1, 0.2, 2.0)], 1.5),
    (2, 0, 0, [(2, 0.55, 1.2), (0, 0.45, 0.8)], 0.3),
    (2, 0, 1, [(3, 0.75, 0.4), (1, 0.25, 1.6)], 2.0),
]


def build_handmade_trace():
    return make_trace(
        num_layers=2,
        num_experts=4,
        top_k=2,
        hidden_dim=8,
        domain="handmade",
        fingerprint=42,
        tokens_per_sample=[1, 2, 1],
        records=HANDMADE_RECORDS,
    )


def scalar_loop_scores(trace):
    """Independent scalar-loop reference for frequency, gating, and easy_ep."""
    num_layers = trace.header.num_layers
    num_experts = trace.header.num_experts
    freq = [[0.0] * num_experts for _ in range(num_layers)]
    gating = [[0.0] * num_experts for _ in range(num_layers)]
    easy = [[0.0] * num_experts for _ in range(num_layers)]
    for rec in trace.iter_records():
        for act in rec.activations:
            freq[rec.layer][act.expert] += 1.0
            gating[rec.layer][act.expert] += act.gate
            easy[rec.layer][act.expert] += (act.gate * act.out_norm) * rec.contribution
    return np.array(freq), np.array(gating), np.array(easy)


@pytest.fixture
def handmade_trace():
    return build_handmade_trace()
