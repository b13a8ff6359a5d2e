"""Hook a pretrained MoE checkpoint and emit a JSON-Lines activation trace.

For every (token, layer) the trace records the activated experts with their
gate values and output L2 norms, plus the contribution scalar
s = 1 - cosine(h, h + routed_output) computed around the routed-expert
residual only (shared-expert paths, where an architecture has them, are not
part of h + routed_output). The emitted file follows the moelab JSON-Lines
trace schema: a header object on the first line, one record object per line
after it.

Supported architectures are Mixtral-style decoders whose MoE blocks expose a
``gate`` router and an ``experts`` module, either the fused form
``experts(hidden, top_k_index, top_k_weights)`` or a ModuleList of per-expert
MLPs. Per-expert output norms are obtained by calling the checkpoint's own
expert modules, never by reimplementing them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

TRACE_FORMAT_VERSION = 1
GATE_SUM_TOLERANCE = 1e-4
_ZERO_NORM = 1e-12


class ExporterError(RuntimeError):
    """Raised when a checkpoint cannot be hooked or capture fails."""


@dataclass
class ExportConfig:
    checkpoint: str
    prompts_file: str
    output_path: str
    domain: str = "export"
    max_tokens_per_sample: int = 64
    max_new_tokens: int = 16
    input_only: bool = False
    device: str = "cpu"


@dataclass
class MoeBlockHandle:
    layer: int
    block: nn.Module
    router: nn.Module
    experts: nn.Module


@dataclass
class _BlockCapture:
    hidden_in: torch.Tensor | None = None
    block_out: torch.Tensor | None = None
    router_scores: torch.Tensor | None = None
    router_indices: torch.Tensor | None = None


def discover_moe_blocks(model: nn.Module) -> list[MoeBlockHandle]:
    """Find the routed-expert blocks of a checkpoint in layer order."""
    handles = []
    for name, module in model.named_modules():
        gate = getattr(module, "gate", None)
        experts = getattr(module, "experts", None)
        if isinstance(gate, nn.Module) and isinstance(experts, nn.Module):
            handles.append(
                MoeBlockHandle(layer=len(handles), block=module, router=gate,
                               experts=experts)
            )
    if not handles:
        raise ExporterError(
            "checkpoint has no identifiable router modules "
            "(expected blocks exposing .gate and .experts)"
        )
    return handles


def _experts_count(handle: MoeBlockHandle, config) -> int:
    experts = handle.experts
    if isinstance(experts, nn.ModuleList):
        return len(experts)
    for attr in ("num_experts",):
        if hasattr(experts, attr):
            return int(getattr(experts, attr))
    return int(getattr(config, "num_local_experts"))


def _top_k(handle: MoeBlockHandle, config) -> int:
    for owner in (handle.router, handle.block):
        if hasattr(owner, "top_k"):
            return int(owner.top_k)
    return int(getattr(config, "num_experts_per_tok"))


def expert_output(handle: MoeBlockHandle, expert: int, states: torch.Tensor) -> torch.Tensor:
    """Evaluate one expert of the checkpoint on a batch of hidden states."""
    experts = handle.experts
    if isinstance(experts, nn.ModuleList):
        return experts[expert](states)
    count = states.shape[0]
    index = torch.full((count, 1), expert, dtype=torch.long, device=states.device)
    weights = torch.ones((count, 1), dtype=states.dtype, device=states.device)
    return experts(states, index, weights)


def _token_contribution(h: np.ndarray, h_tilde: np.ndarray) -> float:
    if np.array_equal(h, h_tilde):
        return 0.0
    norm_a = float(np.linalg.norm(h))
    norm_b = float(np.linalg.norm(h_tilde))
    if norm_a < _ZERO_NORM and norm_b < _ZERO_NORM:
        return 0.0
    if norm_a < _ZERO_NORM or norm_b < _ZERO_NORM:
        return 1.0
    cosine = float(np.dot(h, h_tilde) / (norm_a * norm_b))
    return 1.0 - min(1.0, max(-1.0, cosine))


def checkpoint_fingerprint(config) -> int:
    digest = hashlib.blake2b(
        config.to_json_string().encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def _install_hooks(handles: Sequence[MoeBlockHandle], captures: list[_BlockCapture]):
    installed = []

    def block_hook(layer: int):
        def hook(module, args, output):
            hidden = args[0]
            out = output[0] if isinstance(output, tuple) else output
            captures[layer].hidden_in = hidden.detach().reshape(-1, hidden.shape[-1])
            captures[layer].block_out = out.detach().reshape(-1, out.shape[-1])

        return hook

    def router_hook(layer: int):
        def hook(module, args, output):
            if isinstance(output, tuple) and len(output) >= 3:
                _, scores, indices = output[0], output[1], output[2]
                captures[layer].router_scores = scores.detach()
                captures[layer].router_indices = indices.detach()
            else:
                # plain linear router: derive top-k gates from the logits the
                # way Mixtral-family models do (softmax, top-k, renormalize)
                logits = output[0] if isinstance(output, tuple) else output
                logits = logits.detach().reshape(-1, logits.shape[-1])
                probs = torch.softmax(logits.float(), dim=-1)
                k = _top_k_from_module(module)
                scores, indices = torch.topk(probs, k, dim=-1)
                scores = scores / scores.sum(dim=-1, keepdim=True)
                captures[layer].router_scores = scores
                captures[layer].router_indices = indices

        return hook

    for handle in handles:
        installed.append(handle.block.register_forward_hook(block_hook(handle.layer)))
        installed.append(handle.router.register_forward_hook(router_hook(handle.layer)))
    return installed


def _top_k_from_module(module: nn.Module) -> int:
    if hasattr(module, "top_k"):
        return int(module.top_k)
    raise ExporterError("cannot determine top_k from the router module")


@dataclass
class CapturedSample:
    token_count: int
    # per layer: (indices (T,K), gates (T,K), norms (T,K), s (T,))
    layers: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = field(
        default_factory=list
    )


def capture_sample(
    model: nn.Module,
    handles: Sequence[MoeBlockHandle],
    input_ids: torch.Tensor,
    renormalize_flag: list[bool],
) -> CapturedSample:
    """Run one hooked forward pass and reduce the capture to trace statistics."""
    captures = [_BlockCapture() for _ in handles]
    hooks = _install_hooks(handles, captures)
    try:
        with torch.no_grad():
            model(input_ids=input_ids)
    finally:
        for hook in hooks:
            hook.remove()

    token_count = int(input_ids.shape[-1])
    sample = CapturedSample(token_count=token_count)
    for handle, capture in zip(handles, captures):
        if capture.hidden_in is None or capture.router_scores is None:
            raise ExporterError(
                f"hooks captured nothing for MoE block {handle.layer}; "
                "the forward pass did not reach it"
            )
        hidden = capture.hidden_in
        block_out = capture.block_out
        indices = capture.router_indices.reshape(token_count, -1).cpu().numpy()
        gates = (
            capture.router_scores.reshape(token_count, -1).float().cpu().numpy()
        ).astype(np.float64)
        sums = gates.sum(axis=1)
        if np.abs(sums - 1.0).max() > GATE_SUM_TOLERANCE:
            gates = gates / sums[:, None]
            renormalize_flag[0] = True

        norms = np.zeros_like(gates)
        for expert in np.unique(indices):
            rows, cols = np.nonzero(indices == expert)
            states = hidden[torch.as_tensor(rows, device=hidden.device)]
            with torch.no_grad():
                outputs = expert_output(handle, int(expert), states)
            values = torch.linalg.vector_norm(outputs.float(), dim=-1).cpu().numpy()
            norms[rows, cols] = values

        hidden_np = hidden.float().cpu().numpy().astype(np.float64)
        out_np = block_out.float().cpu().numpy().astype(np.float64)
        contributions = np.array(
            [
                _token_contribution(hidden_np[t], hidden_np[t] + out_np[t])
                for t in range(token_count)
            ]
        )
        sample.layers.append((indices, gates, norms, contributions))
    return sample


def export_trace(config: ExportConfig) -> str:
    """Capture a trace for every prompt and write the JSON-Lines file.

    Returns the output path. Calibration sequences are the prompts plus the
    model's own greedy continuations unless input_only is set.
    """
    from transformers import AutoModelForCausalLM, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(config.checkpoint)
    model = AutoModelForCausalLM.from_pretrained(
        config.checkpoint, dtype=torch.float32, attn_implementation="eager"
    )
    model.to(config.device)
    model.eval()

    handles = discover_moe_blocks(model)
    num_experts = _experts_count(handles[0], model.config)
    top_k = _top_k(handles[0], model.config)
    hidden_dim = int(model.config.hidden_size)

    with open(config.prompts_file, "r", encoding="utf-8") as fh:
        prompts = [line.strip() for line in fh if line.strip()]
    if not prompts:
        raise ExporterError(f"no prompts found in {config.prompts_file}")

    pad_id = tokenizer.pad_token_id
    if pad_id is None:
        pad_id = tokenizer.eos_token_id

    samples: list[CapturedSample] = []
    renormalized = [False]
    for prompt in prompts:
        encoded = tokenizer(prompt, return_tensors="pt")
        input_ids = encoded["input_ids"].to(config.device)
        if not config.input_only and config.max_new_tokens > 0:
            with torch.no_grad():
                input_ids = model.generate(
                    input_ids,
                    max_new_tokens=config.max_new_tokens,
                    do_sample=False,
                    pad_token_id=pad_id,
                )
        input_ids = input_ids[:, : config.max_tokens_per_sample]
        samples.append(capture_sample(model, handles, input_ids, renormalized))

    header = {
        "type": "header",
        "version": TRACE_FORMAT_VERSION,
        "fingerprint": checkpoint_fingerprint(model.config),
        "domain": config.domain,
        "num_layers": len(handles),
        "num_experts": num_experts,
        "top_k": top_k,
        "hidden_dim": hidden_dim,
        "tokens_per_sample": [s.token_count for s in samples],
        "checkpoint": str(config.checkpoint),
        "input_only": config.input_only,
        "renormalized_gates": renormalized[0],
    }
    lines = [json.dumps(header, sort_keys=True)]
    for sample_id, sample in enumerate(samples):
        for token_id in range(sample.token_count):
            for layer, (indices, gates, norms, contributions) in enumerate(sample.layers):
                record = {
                    "sample_id": sample_id,
                    "token_id": token_id,
                    "layer": layer,
                    "experts": [int(e) for e in indices[token_id]],
                    "gates": [float(g) for g in gates[token_id]],
                    "out_norms": [float(n) for n in norms[token_id]],
                    "s": float(contributions[token_id]),
                }
                lines.append(json.dumps(record, sort_keys=True))
    with open(config.output_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
    return config.output_path
