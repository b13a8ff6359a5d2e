"""Builds a tiny local Mixtral-style checkpoint once per test session."""

from __future__ import annotations

import pytest
import torch

WORDS = [
    "the", "tiny", "router", "sends", "tokens", "to", "experts", "every",
    "layer", "keeps", "a", "few", "of", "them", "busy", "and", "quiet",
]

_ACCEPTANCE_PREFIX = "test_exporter_acceptance.py"


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


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory) -> str:
    from tokenizers import Tokenizer, models, pre_tokenizers
    from transformers import MixtralConfig, MixtralForCausalLM, PreTrainedTokenizerFast

    path = tmp_path_factory.mktemp("checkpoint")
    vocab = {"<unk>": 0, "<s>": 1, "</s>": 2}
    for word in WORDS:
        vocab[word] = len(vocab)
    tokenizer = Tokenizer(models.WordLevel(vocab, unk_token="<unk>"))
    tokenizer.pre_tokenizer = pre_tokenizers.Whitespace()
    PreTrainedTokenizerFast(
        tokenizer_object=tokenizer,
        unk_token="<unk>",
        bos_token="<s>",
        eos_token="</s>",
        pad_token="</s>",
    ).save_pretrained(path)

    config = MixtralConfig(
        vocab_size=len(vocab),
        hidden_size=32,
        intermediate_size=64,
        num_hidden_layers=2,
        num_attention_heads=4,
        num_key_value_heads=2,
        num_local_experts=4,
        num_experts_per_tok=2,
        max_position_embeddings=128,
    )
    torch.manual_seed(0)
    MixtralForCausalLM(config).save_pretrained(path)
    return str(path)


@pytest.fixture
def prompts_file(tmp_path) -> str:
    path = tmp_path / "prompts.txt"
    path.write_text("the tiny router sends tokens\nevery layer keeps a few of them busy\n")
    return str(path)
