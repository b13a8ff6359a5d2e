"""Deterministic, instrumented mixture-of-experts forward runtime.

The model is a stack of routed-expert layers with no attention or embedding
stack: a token is a raw hidden vector that is pushed through every layer in
order. Each layer routes the vector to its top-K experts, combines the expert
outputs with softmax gates, and adds the result back onto the input.

Weights are float32 (the on-disk representation); all forward arithmetic is
carried out in float64. Models are immutable after construction and safe to
share across threads.

On-disk layout (little-endian throughout)::

    "MOEP" | version u32 | L u32 | N u32 | K u32 | D u32 | F u32 | seed u64
    per layer: router (N x D f32), then for each AVAILABLE expert i in
               ascending order: W1 (F x D f32), W2 (D x F f32)
    mask: one byte per expert, layer-major (L*N bytes)
    checksum: blake2b-8 of everything after the version field

Masked-off experts are dropped from serialization entirely, so a pruned
model file is strictly smaller than the full one.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    ChecksumError,
    FormatError,
    NumericsError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)

MODEL_MAGIC = b"MOEP"
MODEL_FORMAT_VERSION = 1

_CONFIG_STRUCT = struct.Struct("<IIIIIQ")
_PRELUDE_SIZE = 8  # magic + version
_CHECKSUM_SIZE = 8


def _checksum(body: bytes) -> bytes:
    return hashlib.blake2b(body, digest_size=8).digest()


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of a routed-expert model."""

    num_layers: int
    num_experts: int
    top_k: int
    hidden_dim: int
    expert_inner_dim: int
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("num_layers", "num_experts", "top_k", "hidden_dim", "expert_inner_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
        if self.top_k > self.num_experts:
            raise ValidationError(
                f"top_k ({self.top_k}) must not exceed num_experts ({self.num_experts})"
            )
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= int(self.seed) < 2**64:
            raise ValidationError(f"seed must fit an unsigned 64-bit integer, got {self.seed!r}")


@dataclass(frozen=True)
class LayerWeights:
    """One layer's router matrix and stacked expert MLP weights."""

    router: np.ndarray  # (N, D) float32
    w1: np.ndarray  # (N, F, D) float32
    w2: np.ndarray  # (N, D, F) float32


@dataclass(frozen=True)
class MoeModel:
    """An immutable routed-expert model plus a per-layer availability mask."""

    config: ModelConfig
    layers: tuple[LayerWeights, ...]
    expert_mask: np.ndarray  # (L, N) bool; True = expert available to the router

    def __post_init__(self) -> None:
        cfg = self.config
        if len(self.layers) != cfg.num_layers:
            raise ValidationError(
                f"model has {len(self.layers)} layers, config says {cfg.num_layers}"
            )
        expected = {
            "router": (cfg.num_experts, cfg.hidden_dim),
            "w1": (cfg.num_experts, cfg.expert_inner_dim, cfg.hidden_dim),
            "w2": (cfg.num_experts, cfg.hidden_dim, cfg.expert_inner_dim),
        }
        for li, lw in enumerate(self.layers):
            for name, shape in expected.items():
                arr = getattr(lw, name)
                if arr.shape != shape or arr.dtype != np.float32:
                    raise ValidationError(
                        f"layer {li} {name} must be float32 with shape {shape}, "
                        f"got {arr.dtype} {arr.shape}"
                    )
        if self.expert_mask.shape != (cfg.num_layers, cfg.num_experts):
            raise ValidationError("expert_mask shape does not match config")
        if self.expert_mask.dtype != np.bool_:
            raise ValidationError("expert_mask must be boolean")
        available = self.expert_mask.sum(axis=1)
        if (available < cfg.top_k).any():
            bad = int(np.argmin(available))
            raise ValidationError(
                f"layer {bad} has {int(available[bad])} available experts, "
                f"fewer than top_k={cfg.top_k}"
            )

    def available_experts(self, layer: int) -> np.ndarray:
        return np.flatnonzero(self.expert_mask[layer])


@dataclass(frozen=True)
class RoutingOutcome:
    """Top-K routing decision for one token at one layer.

    Experts are ordered by descending logit (ties resolved toward the lower
    expert index). Gates are the softmax of the K selected logits, so they
    are positive and sum to one; every deselected expert has an implicit
    gate of zero.
    """

    experts: np.ndarray  # (K,) int64, distinct, all available
    gates: np.ndarray  # (K,) float64, positive, sum to 1

    @property
    def selected(self) -> tuple[tuple[int, float], ...]:
        return tuple((int(e), float(g)) for e, g in zip(self.experts, self.gates))


@dataclass(frozen=True)
class LayerForwardRecord:
    """Everything observed while pushing one token through one layer."""

    hidden_in: np.ndarray  # (D,) float64, the layer input
    routed_sum: np.ndarray  # (D,) float64, gate-weighted sum of expert outputs
    hidden_out: np.ndarray  # (D,) float64, hidden_in + routed_sum
    routing: RoutingOutcome
    expert_output_norms: np.ndarray  # (K,) float64, L2 norm of each expert output


def build_model(config: ModelConfig) -> MoeModel:
    """Construct a model with seeded, zero-mean, fan-in-scaled float32 weights.

    Identical configs produce bit-identical models.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    d_scale = 1.0 / np.sqrt(cfg.hidden_dim)
    f_scale = 1.0 / np.sqrt(cfg.expert_inner_dim)
    layers = []
    for _ in range(cfg.num_layers):
        router = (rng.standard_normal((cfg.num_experts, cfg.hidden_dim)) * d_scale).astype(
            np.float32
        )
        w1 = (
            rng.standard_normal((cfg.num_experts, cfg.expert_inner_dim, cfg.hidden_dim)) * d_scale
        ).astype(np.float32)
        w2 = (
            rng.standard_normal((cfg.num_experts, cfg.hidden_dim, cfg.expert_inner_dim)) * f_scale
        ).astype(np.float32)
        layers.append(LayerWeights(router=router, w1=w1, w2=w2))
    mask = np.ones((cfg.num_layers, cfg.num_experts), dtype=bool)
    return MoeModel(config=cfg, layers=tuple(layers), expert_mask=mask)


def _as_hidden(model: MoeModel, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (model.config.hidden_dim,):
        raise ValidationError(
            f"hidden vector must have shape ({model.config.hidden_dim},), got {h.shape}"
        )
    if not np.isfinite(h).all():
        raise ValidationError("hidden vector contains non-finite values")
    return h


def _check_layer(model: MoeModel, layer: int) -> None:
    if not 0 <= layer < model.config.num_layers:
        raise ValidationError(
            f"layer index {layer} out of range [0, {model.config.num_layers})"
        )


def _silu(x: np.ndarray) -> np.ndarray:
    # x * sigmoid(x), evaluated without overflow for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = x[~pos] * ex / (1.0 + ex)
    return out


def route(model: MoeModel, layer: int, h: np.ndarray) -> RoutingOutcome:
    """Select the K experts with the largest router logits among available ones.

    Logits are row-wise dot products of the layer's router matrix with h,
    computed for available experts only. Ties break toward the lower expert
    index; gates are the softmax over the K selected logits.
    """
    _check_layer(model, layer)
    h = _as_hidden(model, h)
    k = model.config.top_k
    avail = model.available_experts(layer)
    if avail.size < k:
        raise ValidationError(
            f"layer {layer} has {avail.size} available experts, need at least {k}"
        )
    logits = model.layers[layer].router[avail].astype(np.float64) @ h
    if not np.isfinite(logits).all():
        raise NumericsError(f"layer {layer}: router logits are not finite")
    # stable argsort on negated logits keeps ascending index order among ties
    order = np.argsort(-logits, kind="stable")[:k]
    experts = avail[order].astype(np.int64)
    selected_logits = logits[order]
    shifted = selected_logits - selected_logits.max()
    weights = np.exp(shifted)
    gates = weights / weights.sum()
    return RoutingOutcome(experts=experts, gates=gates)


def layer_forward(model: MoeModel, layer: int, h: np.ndarray) -> LayerForwardRecord:
    """Run one token through one layer: route, apply experts, add the residual.

    Each expert computes W2 @ silu(W1 @ h) with silu(x) = x * sigmoid(x).
    The routed sum is the gate-weighted combination of the K expert outputs,
    and the layer output is hidden_in + routed_sum.
    """
    routing = route(model, layer, h)
    h = _as_hidden(model, h)
    lw = model.layers[layer]
    w1 = lw.w1[routing.experts].astype(np.float64)  # (K, F, D)
    w2 = lw.w2[routing.experts].astype(np.float64)  # (K, D, F)
    with np.errstate(over="ignore", invalid="ignore"):
        pre = w1 @ h  # (K, F)
        act = _silu(pre)
        outputs = np.einsum("kdf,kf->kd", w2, act)  # (K, D)
    if not np.isfinite(outputs).all():
        raise NumericsError(f"layer {layer}: expert outputs are not finite")
    norms = np.linalg.norm(outputs, axis=1)
    routed_sum = routing.gates @ outputs
    hidden_out = h + routed_sum
    if not np.isfinite(hidden_out).all():
        raise NumericsError(f"layer {layer}: layer output is not finite")
    return LayerForwardRecord(
        hidden_in=h,
        routed_sum=routed_sum,
        hidden_out=hidden_out,
        routing=routing,
        expert_output_norms=norms,
    )


def forward_sequence(
    model: MoeModel, tokens: np.ndarray | list[np.ndarray]
) -> list[list[LayerForwardRecord]]:
    """Push every token independently through all layers in order.

    Layer l+1 receives the hidden_out of layer l. There is no cross-token
    state. Returns records[token][layer].
    """
    tokens = list(tokens)
    if not tokens:
        raise ValidationError("token sequence must be non-empty")
    all_records: list[list[LayerForwardRecord]] = []
    for ti, token in enumerate(tokens):
        h = np.asarray(token, dtype=np.float64)
        per_layer: list[LayerForwardRecord] = []
        for li in range(model.config.num_layers):
            try:
                record = layer_forward(model, li, h)
            except (ValidationError, NumericsError) as exc:
                raise type(exc)(f"token {ti}, layer {li}: {exc}") from exc
            per_layer.append(record)
            h = record.hidden_out
        all_records.append(per_layer)
    return all_records


# ---------------------------------------------------------------------------
# serialization


def model_to_bytes(model: MoeModel) -> bytes:
    cfg = model.config
    parts = [
        MODEL_MAGIC,
        struct.pack("<I", MODEL_FORMAT_VERSION),
        _CONFIG_STRUCT.pack(
            cfg.num_layers,
            cfg.num_experts,
            cfg.top_k,
            cfg.hidden_dim,
            cfg.expert_inner_dim,
            cfg.seed,
        ),
    ]
    for li, lw in enumerate(model.layers):
        parts.append(np.ascontiguousarray(lw.router, dtype="<f4").tobytes())
        for ei in range(cfg.num_experts):
            if model.expert_mask[li, ei]:
                parts.append(np.ascontiguousarray(lw.w1[ei], dtype="<f4").tobytes())
                parts.append(np.ascontiguousarray(lw.w2[ei], dtype="<f4").tobytes())
    parts.append(model.expert_mask.astype(np.uint8).tobytes())
    blob = b"".join(parts)
    return blob + _checksum(blob[_PRELUDE_SIZE:])


def model_from_bytes(data: bytes) -> MoeModel:
    min_size = _PRELUDE_SIZE + _CONFIG_STRUCT.size + _CHECKSUM_SIZE
    if len(data) < min_size:
        raise TruncatedFileError(f"model file is {len(data)} bytes, need at least {min_size}")
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MODEL_MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != MODEL_FORMAT_VERSION:
        raise VersionMismatchError(
            f"unsupported model format version {version}, expected {MODEL_FORMAT_VERSION}"
        )
    fields = _CONFIG_STRUCT.unpack_from(data, _PRELUDE_SIZE)
    num_layers, num_experts, top_k, hidden_dim, inner_dim, seed = (int(v) for v in fields)
    try:
        cfg = ModelConfig(num_layers, num_experts, top_k, hidden_dim, inner_dim, seed)
    except ValidationError as exc:
        raise FormatError(f"model header is invalid: {exc}") from exc

    mask_size = num_layers * num_experts
    if len(data) < min_size + mask_size:
        raise TruncatedFileError("model file too short to hold its expert mask")
    mask_bytes = data[-_CHECKSUM_SIZE - mask_size : -_CHECKSUM_SIZE]
    raw_mask = np.frombuffer(mask_bytes, dtype=np.uint8).reshape(num_layers, num_experts)
    mask = raw_mask != 0

    # length check first (counting nonzero mask bytes), so truncation reports
    # separately from corruption; a flipped payload byte keeps the length and
    # fails the checksum instead
    router_size = num_experts * hidden_dim * 4
    expert_size = 2 * inner_dim * hidden_dim * 4
    matrices_size = num_layers * router_size + int(mask.sum()) * expert_size
    expected = _PRELUDE_SIZE + _CONFIG_STRUCT.size + matrices_size + mask_size + _CHECKSUM_SIZE
    if len(data) != expected:
        raise TruncatedFileError(
            f"model file is {len(data)} bytes, header promises {expected}"
        )
    if _checksum(data[_PRELUDE_SIZE:-_CHECKSUM_SIZE]) != data[-_CHECKSUM_SIZE:]:
        raise ChecksumError("model file body does not match its checksum")
    if not np.isin(raw_mask, (0, 1)).all():
        raise FormatError("expert mask bytes must be 0 or 1")

    offset = _PRELUDE_SIZE + _CONFIG_STRUCT.size
    layers = []
    for li in range(num_layers):
        router = (
            np.frombuffer(data, dtype="<f4", count=num_experts * hidden_dim, offset=offset)
            .reshape(num_experts, hidden_dim)
            .copy()
        )
        offset += router_size
        w1 = np.zeros((num_experts, inner_dim, hidden_dim), dtype=np.float32)
        w2 = np.zeros((num_experts, hidden_dim, inner_dim), dtype=np.float32)
        for ei in range(num_experts):
            if not mask[li, ei]:
                continue
            w1[ei] = np.frombuffer(
                data, dtype="<f4", count=inner_dim * hidden_dim, offset=offset
            ).reshape(inner_dim, hidden_dim)
            offset += inner_dim * hidden_dim * 4
            w2[ei] = np.frombuffer(
                data, dtype="<f4", count=hidden_dim * inner_dim, offset=offset
            ).reshape(hidden_dim, inner_dim)
            offset += hidden_dim * inner_dim * 4
        layers.append(LayerWeights(router=router, w1=w1, w2=w2))
    return MoeModel(config=cfg, layers=tuple(layers), expert_mask=mask)


def write_model(model: MoeModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def read_model(path) -> MoeModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def model_fingerprint(model: MoeModel) -> int:
    """64-bit fingerprint of the model's canonical serialization."""
    return int.from_bytes(_checksum(model_to_bytes(model)), "little")


def models_equal(a: MoeModel, b: MoeModel) -> bool:
    return model_to_bytes(a) == model_to_bytes(b)
