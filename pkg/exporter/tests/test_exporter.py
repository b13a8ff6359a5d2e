"""Hook discovery, expert evaluation, and trace emission on a tiny checkpoint."""

from __future__ import annotations

import json

import pytest
import torch

from moelab_exporter import (
    ExportConfig,
    ExporterError,
    discover_moe_blocks,
    expert_output,
    export_trace,
)
from moelab_exporter.cli import main as cli_main


@pytest.fixture(scope="module")
def loaded(tiny_checkpoint):
    from transformers import AutoModelForCausalLM, AutoTokenizer

    model = AutoModelForCausalLM.from_pretrained(
        tiny_checkpoint, dtype=torch.float32, attn_implementation="eager"
    )
    model.eval()
    return model, AutoTokenizer.from_pretrained(tiny_checkpoint)


class TestDiscovery:
    def test_finds_every_moe_block(self, loaded):
        model, _ = loaded
        handles = discover_moe_blocks(model)
        assert len(handles) == model.config.num_hidden_layers
        assert [h.layer for h in handles] == list(range(len(handles)))

    def test_rejects_model_without_routers(self):
        import torch.nn as nn

        with pytest.raises(ExporterError):
            discover_moe_blocks(nn.Linear(4, 4))


class TestExpertOutput:
    def test_matches_functional_recomputation(self, loaded):
        model, _ = loaded
        handle = discover_moe_blocks(model)[0]
        experts = handle.experts
        states = torch.randn(5, model.config.hidden_size)
        got = expert_output(handle, 2, states)
        # independent recomputation from the checkpoint's raw parameters
        gate, up = torch.nn.functional.linear(states, experts.gate_up_proj[2]).chunk(2, dim=-1)
        expected = torch.nn.functional.linear(experts.act_fn(gate) * up, experts.down_proj[2])
        assert torch.allclose(got, expected, atol=1e-6)


class TestExportTrace:
    def test_emits_jsonl_with_expected_counts(self, tiny_checkpoint, prompts_file, tmp_path):
        out = tmp_path / "trace.jsonl"
        export_trace(
            ExportConfig(
                checkpoint=tiny_checkpoint,
                prompts_file=prompts_file,
                output_path=str(out),
                domain="unit",
                max_new_tokens=4,
            )
        )
        lines = out.read_text().strip().splitlines()
        header = json.loads(lines[0])
        assert header["type"] == "header"
        assert header["num_layers"] == 2
        assert header["num_experts"] == 4
        assert header["top_k"] == 2
        assert header["domain"] == "unit"
        total_records = header["num_layers"] * sum(header["tokens_per_sample"])
        assert len(lines) - 1 == total_records

    def test_one_token_per_sample_gives_l_records(self, tiny_checkpoint, tmp_path):
        prompts = tmp_path / "p.txt"
        prompts.write_text("tokens\n")
        out = tmp_path / "trace.jsonl"
        export_trace(
            ExportConfig(
                checkpoint=tiny_checkpoint,
                prompts_file=str(prompts),
                output_path=str(out),
                max_tokens_per_sample=1,
                input_only=True,
            )
        )
        lines = out.read_text().strip().splitlines()
        header = json.loads(lines[0])
        assert header["tokens_per_sample"] == [1]
        assert len(lines) - 1 == header["num_layers"]

    def test_input_only_skips_generation(self, tiny_checkpoint, prompts_file, tmp_path):
        out = tmp_path / "trace.jsonl"
        export_trace(
            ExportConfig(
                checkpoint=tiny_checkpoint,
                prompts_file=prompts_file,
                output_path=str(out),
                input_only=True,
            )
        )
        header = json.loads(out.read_text().splitlines()[0])
        assert header["input_only"] is True
        # prompt lengths: 5 and 8 whitespace-separated words
        assert header["tokens_per_sample"] == [5, 8]

    def test_export_is_deterministic(self, tiny_checkpoint, prompts_file, tmp_path):
        paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
        for path in paths:
            export_trace(
                ExportConfig(
                    checkpoint=tiny_checkpoint,
                    prompts_file=prompts_file,
                    output_path=str(path),
                    max_new_tokens=4,
                )
            )
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_gate_sums_close_to_one(self, tiny_checkpoint, prompts_file, tmp_path):
        out = tmp_path / "trace.jsonl"
        export_trace(
            ExportConfig(
                checkpoint=tiny_checkpoint,
                prompts_file=prompts_file,
                output_path=str(out),
                max_new_tokens=2,
            )
        )
        for line in out.read_text().strip().splitlines()[1:]:
            record = json.loads(line)
            assert sum(record["gates"]) == pytest.approx(1.0, abs=1e-4)
            assert all(g > 0 for g in record["gates"])
            assert all(n >= 0 for n in record["out_norms"])
            assert 0.0 <= record["s"] <= 2.0


class TestCli:
    def test_cli_runs_end_to_end(self, tiny_checkpoint, prompts_file, tmp_path, capsys):
        out = tmp_path / "trace.jsonl"
        code = cli_main([
            "--checkpoint", tiny_checkpoint,
            "--prompts", prompts_file,
            "--out", str(out),
            "--max-new-tokens", "2",
            "--domain", "cli",
        ])
        assert code == 0
        assert out.exists()
        assert str(out) in capsys.readouterr().out

    def test_cli_reports_missing_prompts_file(self, tiny_checkpoint, tmp_path, capsys):
        code = cli_main([
            "--checkpoint", tiny_checkpoint,
            "--prompts", str(tmp_path / "none.txt"),
            "--out", str(tmp_path / "t.jsonl"),
        ])
        assert code == 3
        assert "error" in capsys.readouterr().err
