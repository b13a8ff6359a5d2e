"""Calibration traces: the sufficient statistics for trace-based expert scoring.

A trace stores, for every (sample, token, layer), the K activated experts
with their gate values and output L2 norms, plus the token-contribution
scalar s = 1 - cosine(hidden_in, hidden_out). Nothing else from the forward
pass is retained; every trace-driven score in :mod:`moelab.scoring` is a sum
over these records.

Binary layout (little-endian, canonical)::

    "MOET" | version u32
    domain: u32 byte length + UTF-8 bytes
    fingerprint u64 | L u32 | N u32 | K u32 | D u32 | M u32 | T_n (M x u32)
    records, fixed width, in (sample, token, layer) order:
        sample_id u32 | token_id u32 | layer u32 |
        K x (expert u32, gate f32, out_norm f32) | s f32
    checksum: blake2b-8 of everything after the version field

A lossless JSON-Lines rendering is also supported: the first line is a
header object and every following line is one record object (see
``write_trace_jsonl``). The binary form is canonical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    ChecksumError,
    FormatError,
    HeaderMismatchError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)
from .model import MoeModel, forward_sequence, model_fingerprint
from .parallel import ordered_map, resolve_workers

TRACE_MAGIC = b"MOET"
TRACE_FORMAT_VERSION = 1

GATE_SUM_TOLERANCE = 1e-4  # validator tolerance on per-record gate sums
_ZERO_NORM = 1e-12  # below this a vector counts as zero for the cosine


class ExpertActivation(NamedTuple):
    """One activated expert within a record: index, gate, output norm."""

    expert: int
    gate: float
    out_norm: float


class TraceRecord(NamedTuple):
    """One (sample, token, layer) record in reading order."""

    sample_id: int
    token_id: int
    layer: int
    activations: tuple[ExpertActivation, ...]
    contribution: float


@dataclass(frozen=True)
class TraceHeader:
    fingerprint: int  # u64 hash of the traced model / checkpoint
    num_layers: int
    num_experts: int
    top_k: int
    hidden_dim: int
    domain: str
    tokens_per_sample: tuple[int, ...]

    @property
    def num_samples(self) -> int:
        return len(self.tokens_per_sample)

    @property
    def num_tokens(self) -> int:
        return int(sum(self.tokens_per_sample))


@dataclass
class TraceFile:
    """Column-major storage of trace records, ordered (sample, token, layer)."""

    header: TraceHeader
    sample_ids: np.ndarray  # (R,) uint32
    token_ids: np.ndarray  # (R,) uint32
    layers: np.ndarray  # (R,) uint32
    experts: np.ndarray  # (R, K) uint32
    gates: np.ndarray  # (R, K) float32
    out_norms: np.ndarray  # (R, K) float32
    contributions: np.ndarray  # (R,) float32

    @property
    def num_records(self) -> int:
        return int(self.sample_ids.shape[0])

    def iter_records(self):
        for i in range(self.num_records):
            acts = tuple(
                ExpertActivation(
                    int(self.experts[i, j]),
                    float(self.gates[i, j]),
                    float(self.out_norms[i, j]),
                )
                for j in range(self.experts.shape[1])
            )
            yield TraceRecord(
                int(self.sample_ids[i]),
                int(self.token_ids[i]),
                int(self.layers[i]),
                acts,
                float(self.contributions[i]),
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TraceFile):
            return NotImplemented
        return self.header == other.header and all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in (
                "sample_ids",
                "token_ids",
                "layers",
                "experts",
                "gates",
                "out_norms",
                "contributions",
            )
        )


def token_contribution(h: np.ndarray, h_tilde: np.ndarray) -> float:
    """1 - cosine(h, h_tilde), with a fixed convention for near-zero vectors.

    If both norms are below 1e-12 the result is 0; if exactly one is, the
    result is 1. The cosine is clipped into [-1, 1] so the result always
    lies in [0, 2].
    """
    h = np.asarray(h, dtype=np.float64)
    h_tilde = np.asarray(h_tilde, dtype=np.float64)
    if not (np.isfinite(h).all() and np.isfinite(h_tilde).all()):
        raise ValidationError("token_contribution requires finite vectors")
    if np.array_equal(h, h_tilde):
        # cosine of a vector with itself is exactly 1; shortcut past roundoff
        # (the both-zero convention also yields 0, so this is safe for zeros)
        return 0.0
    norm_a = float(np.linalg.norm(h))
    norm_b = float(np.linalg.norm(h_tilde))
    if norm_a < _ZERO_NORM and norm_b < _ZERO_NORM:
        return 0.0
    if norm_a < _ZERO_NORM or norm_b < _ZERO_NORM:
        return 1.0
    cosine = float(np.dot(h, h_tilde) / (norm_a * norm_b))
    cosine = min(1.0, max(-1.0, cosine))
    return 1.0 - cosine


def make_trace(
    *,
    num_layers: int,
    num_experts: int,
    top_k: int,
    hidden_dim: int,
    domain: str,
    fingerprint: int,
    tokens_per_sample: Sequence[int],
    records: Sequence[tuple[int, int, int, Sequence[tuple[int, float, float]], float]],
) -> TraceFile:
    """Assemble a TraceFile from plain-Python records and validate it.

    Each record is (sample_id, token_id, layer, [(expert, gate, out_norm)] * K, s).
    """
    count = len(records)
    sample_ids = np.zeros(count, dtype=np.uint32)
    token_ids = np.zeros(count, dtype=np.uint32)
    layers = np.zeros(count, dtype=np.uint32)
    experts = np.zeros((count, top_k), dtype=np.uint32)
    gates = np.zeros((count, top_k), dtype=np.float32)
    out_norms = np.zeros((count, top_k), dtype=np.float32)
    contributions = np.zeros(count, dtype=np.float32)
    for i, (sid, tid, layer, acts, s) in enumerate(records):
        if len(acts) != top_k:
            raise ValidationError(
                f"record {i} has {len(acts)} activations, expected top_k={top_k}"
            )
        sample_ids[i] = sid
        token_ids[i] = tid
        layers[i] = layer
        for j, (e, g, n) in enumerate(acts):
            experts[i, j] = e
            gates[i, j] = g
            out_norms[i, j] = n
        contributions[i] = s
    trace = TraceFile(
        header=TraceHeader(
            fingerprint=fingerprint,
            num_layers=num_layers,
            num_experts=num_experts,
            top_k=top_k,
            hidden_dim=hidden_dim,
            domain=domain,
            tokens_per_sample=tuple(int(t) for t in tokens_per_sample),
        ),
        sample_ids=sample_ids,
        token_ids=token_ids,
        layers=layers,
        experts=experts,
        gates=gates,
        out_norms=out_norms,
        contributions=contributions,
    )
    validate_trace(trace)
    return trace


def validate_trace(trace: TraceFile) -> None:
    """Check every structural invariant of a trace; raise ValidationError if broken."""
    hdr = trace.header
    if min(hdr.num_layers, hdr.num_experts, hdr.top_k, hdr.hidden_dim) < 1:
        raise ValidationError("trace header dimensions must be positive")
    if hdr.top_k > hdr.num_experts:
        raise ValidationError("trace header has top_k > num_experts")
    if any(t < 1 for t in hdr.tokens_per_sample):
        raise ValidationError("every sample must contain at least one token")
    expected = hdr.num_layers * hdr.num_tokens
    if trace.num_records != expected:
        raise ValidationError(
            f"trace holds {trace.num_records} records, header promises {expected}"
        )
    if trace.num_records == 0:
        return
    if trace.experts.shape[1] != hdr.top_k:
        raise ValidationError("record width does not match header top_k")
    if int(trace.layers.max()) >= hdr.num_layers:
        raise ValidationError("record layer index out of header bounds")
    if int(trace.experts.max()) >= hdr.num_experts:
        raise ValidationError("record expert index out of header bounds")
    if int(trace.sample_ids.max()) >= hdr.num_samples:
        raise ValidationError("record sample_id out of header bounds")
    t_n = np.asarray(hdr.tokens_per_sample, dtype=np.int64)
    if (trace.token_ids.astype(np.int64) >= t_n[trace.sample_ids]).any():
        raise ValidationError("record token_id out of its sample's token count")
    if (trace.gates <= 0).any():
        raise ValidationError("stored gate values must be positive")
    sums = trace.gates.astype(np.float64).sum(axis=1)
    worst = float(np.abs(sums - 1.0).max())
    if worst > GATE_SUM_TOLERANCE:
        raise ValidationError(
            f"per-record gate sums deviate from 1 by {worst:.3g} "
            f"(tolerance {GATE_SUM_TOLERANCE})"
        )
    if (trace.out_norms < 0).any():
        raise ValidationError("output norms must be nonnegative")
    contribs = trace.contributions.astype(np.float64)
    if (contribs < -1e-6).any() or (contribs > 2.0 + 1e-6).any():
        raise ValidationError("token contributions must lie in [0, 2]")
    for row in trace.experts:
        if len(set(int(e) for e in row)) != hdr.top_k:
            raise ValidationError("a record lists the same expert twice")


def capture_trace(
    model: MoeModel,
    samples: Sequence[np.ndarray],
    domain: str,
    workers: int | None = None,
) -> TraceFile:
    """Forward every sample through the model and record activation statistics.

    Samples may be sharded across workers; records are assembled grouped by
    sample in ascending sample id, so the output is byte-identical for any
    worker count.
    """
    workers = resolve_workers(workers)
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    if not samples:
        raise ValidationError("need at least one calibration sample")
    cfg = model.config
    for si, sample in enumerate(samples):
        if sample.ndim != 2 or sample.shape[1] != cfg.hidden_dim:
            raise ValidationError(
                f"sample {si} must have shape (T, {cfg.hidden_dim}), got {sample.shape}"
            )
        if sample.shape[0] < 1:
            raise ValidationError(f"sample {si} is empty")

    fingerprint = model_fingerprint(model)

    def capture_one(item: tuple[int, np.ndarray]):
        sid, sample = item
        records = forward_sequence(model, sample)
        count = sample.shape[0] * cfg.num_layers
        experts = np.zeros((count, cfg.top_k), dtype=np.uint32)
        gates = np.zeros((count, cfg.top_k), dtype=np.float32)
        norms = np.zeros((count, cfg.top_k), dtype=np.float32)
        contribs = np.zeros(count, dtype=np.float32)
        token_ids = np.zeros(count, dtype=np.uint32)
        layer_ids = np.zeros(count, dtype=np.uint32)
        i = 0
        for tid, per_layer in enumerate(records):
            for lid, rec in enumerate(per_layer):
                token_ids[i] = tid
                layer_ids[i] = lid
                experts[i] = rec.routing.experts
                gates[i] = rec.routing.gates.astype(np.float32)
                norms[i] = rec.expert_output_norms.astype(np.float32)
                contribs[i] = np.float32(
                    token_contribution(rec.hidden_in, rec.hidden_out)
                )
                i += 1
        return sid, token_ids, layer_ids, experts, gates, norms, contribs

    blocks = ordered_map(capture_one, list(enumerate(samples)), workers)
    blocks.sort(key=lambda b: b[0])
    sample_ids = np.concatenate(
        [np.full(b[1].shape[0], b[0], dtype=np.uint32) for b in blocks]
    )
    trace = TraceFile(
        header=TraceHeader(
            fingerprint=fingerprint,
            num_layers=cfg.num_layers,
            num_experts=cfg.num_experts,
            top_k=cfg.top_k,
            hidden_dim=cfg.hidden_dim,
            domain=domain,
            tokens_per_sample=tuple(int(s.shape[0]) for s in samples),
        ),
        sample_ids=sample_ids,
        token_ids=np.concatenate([b[1] for b in blocks]),
        layers=np.concatenate([b[2] for b in blocks]),
        experts=np.concatenate([b[3] for b in blocks]),
        gates=np.concatenate([b[4] for b in blocks]),
        out_norms=np.concatenate([b[5] for b in blocks]),
        contributions=np.concatenate([b[6] for b in blocks]),
    )
    validate_trace(trace)
    return trace


def merge_traces(traces: Sequence[TraceFile]) -> TraceFile:
    """Concatenate traces captured from the same model and domain.

    Sample ids of later traces are offset so every sample keeps a unique id;
    tokens_per_sample sequences are concatenated in argument order.
    """
    if not traces:
        raise ValidationError("merge_traces needs at least one trace")
    first = traces[0].header
    for t in traces[1:]:
        h = t.header
        same = (
            h.fingerprint == first.fingerprint
            and h.domain == first.domain
            and (h.num_layers, h.num_experts, h.top_k, h.hidden_dim)
            == (first.num_layers, first.num_experts, first.top_k, first.hidden_dim)
        )
        if not same:
            raise HeaderMismatchError(
                "traces disagree on fingerprint, domain, or dimensions"
            )
    tokens_per_sample: list[int] = []
    sample_id_parts = []
    offset = 0
    for t in traces:
        sample_id_parts.append(t.sample_ids.astype(np.uint64) + offset)
        offset += t.header.num_samples
        tokens_per_sample.extend(t.header.tokens_per_sample)
    merged = TraceFile(
        header=TraceHeader(
            fingerprint=first.fingerprint,
            num_layers=first.num_layers,
            num_experts=first.num_experts,
            top_k=first.top_k,
            hidden_dim=first.hidden_dim,
            domain=first.domain,
            tokens_per_sample=tuple(tokens_per_sample),
        ),
        sample_ids=np.concatenate(sample_id_parts).astype(np.uint32),
        token_ids=np.concatenate([t.token_ids for t in traces]),
        layers=np.concatenate([t.layers for t in traces]),
        experts=np.concatenate([t.experts for t in traces]),
        gates=np.concatenate([t.gates for t in traces]),
        out_norms=np.concatenate([t.out_norms for t in traces]),
        contributions=np.concatenate([t.contributions for t in traces]),
    )
    validate_trace(merged)
    return merged


# ---------------------------------------------------------------------------
# binary serialization


def _record_dtype(top_k: int) -> np.dtype:
    fields = [("sample_id", "<u4"), ("token_id", "<u4"), ("layer", "<u4")]
    for j in range(top_k):
        fields += [(f"expert{j}", "<u4"), (f"gate{j}", "<f4"), (f"norm{j}", "<f4")]
    fields.append(("s", "<f4"))
    return np.dtype(fields)


def trace_to_bytes(trace: TraceFile) -> bytes:
    hdr = trace.header
    domain_bytes = hdr.domain.encode("utf-8")
    parts = [
        TRACE_MAGIC,
        struct.pack("<I", TRACE_FORMAT_VERSION),
        struct.pack("<I", len(domain_bytes)),
        domain_bytes,
        struct.pack(
            "<QIIIII",
            hdr.fingerprint,
            hdr.num_layers,
            hdr.num_experts,
            hdr.top_k,
            hdr.hidden_dim,
            hdr.num_samples,
        ),
        np.asarray(hdr.tokens_per_sample, dtype="<u4").tobytes(),
    ]
    packed = np.zeros(trace.num_records, dtype=_record_dtype(hdr.top_k))
    packed["sample_id"] = trace.sample_ids
    packed["token_id"] = trace.token_ids
    packed["layer"] = trace.layers
    for j in range(hdr.top_k):
        packed[f"expert{j}"] = trace.experts[:, j]
        packed[f"gate{j}"] = trace.gates[:, j]
        packed[f"norm{j}"] = trace.out_norms[:, j]
    packed["s"] = trace.contributions
    parts.append(packed.tobytes())
    blob = b"".join(parts)
    return blob + hashlib.blake2b(blob[8:], digest_size=8).digest()


def trace_from_bytes(data: bytes) -> TraceFile:
    if len(data) < 8 + 4:
        raise TruncatedFileError(f"trace file is only {len(data)} bytes")
    if data[:4] != TRACE_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {TRACE_MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != TRACE_FORMAT_VERSION:
        raise VersionMismatchError(
            f"unsupported trace format version {version}, expected {TRACE_FORMAT_VERSION}"
        )
    offset = 8

    def need(n: int) -> None:
        if offset + n > len(data):
            raise TruncatedFileError("trace file ends inside its header")

    need(4)
    (domain_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    need(domain_len)
    domain = data[offset : offset + domain_len].decode("utf-8")
    offset += domain_len
    need(8 + 5 * 4)
    fingerprint, num_layers, num_experts, top_k, hidden_dim, num_samples = struct.unpack_from(
        "<QIIIII", data, offset
    )
    offset += 8 + 5 * 4
    need(num_samples * 4)
    tokens_per_sample = np.frombuffer(data, dtype="<u4", count=num_samples, offset=offset)
    offset += num_samples * 4

    record_count = int(num_layers) * int(tokens_per_sample.sum())
    dtype = _record_dtype(int(top_k))
    expected = offset + record_count * dtype.itemsize + 8
    if len(data) != expected:
        raise TruncatedFileError(
            f"trace file is {len(data)} bytes, header promises {expected}"
        )
    if hashlib.blake2b(data[8:-8], digest_size=8).digest() != data[-8:]:
        raise ChecksumError("trace file body does not match its checksum")

    packed = np.frombuffer(data, dtype=dtype, count=record_count, offset=offset)
    k = int(top_k)
    experts = np.zeros((record_count, k), dtype=np.uint32)
    gates = np.zeros((record_count, k), dtype=np.float32)
    norms = np.zeros((record_count, k), dtype=np.float32)
    for j in range(k):
        experts[:, j] = packed[f"expert{j}"]
        gates[:, j] = packed[f"gate{j}"]
        norms[:, j] = packed[f"norm{j}"]
    trace = TraceFile(
        header=TraceHeader(
            fingerprint=int(fingerprint),
            num_layers=int(num_layers),
            num_experts=int(num_experts),
            top_k=k,
            hidden_dim=int(hidden_dim),
            domain=domain,
            tokens_per_sample=tuple(int(t) for t in tokens_per_sample),
        ),
        sample_ids=packed["sample_id"].copy(),
        token_ids=packed["token_id"].copy(),
        layers=packed["layer"].copy(),
        experts=experts,
        gates=gates,
        out_norms=norms,
        contributions=packed["s"].copy(),
    )
    validate_trace(trace)
    return trace


def write_trace(trace: TraceFile, path) -> None:
    with open(path, "wb") as fh:
        fh.write(trace_to_bytes(trace))


def read_trace(path) -> TraceFile:
    """Load a trace from its canonical binary form or its JSON-Lines rendering."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == TRACE_MAGIC:
        return trace_from_bytes(data)
    if data[:1] == b"{":
        return trace_from_jsonl(data.decode("utf-8"))
    raise FormatError("file is neither a binary trace nor a JSON-Lines trace")


# ---------------------------------------------------------------------------
# JSON-Lines rendering


def _float_list(values: np.ndarray) -> list[float]:
    # float(np.float32) is the exact double value of the stored f32, so the
    # decimal rendering round-trips losslessly
    return [float(v) for v in values]


def write_trace_jsonl(trace: TraceFile, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(trace_to_jsonl(trace))


def trace_to_jsonl(trace: TraceFile) -> str:
    hdr = trace.header
    lines = [
        json.dumps(
            {
                "type": "header",
                "version": TRACE_FORMAT_VERSION,
                "fingerprint": hdr.fingerprint,
                "domain": hdr.domain,
                "num_layers": hdr.num_layers,
                "num_experts": hdr.num_experts,
                "top_k": hdr.top_k,
                "hidden_dim": hdr.hidden_dim,
                "tokens_per_sample": list(hdr.tokens_per_sample),
            },
            sort_keys=True,
        )
    ]
    for i in range(trace.num_records):
        lines.append(
            json.dumps(
                {
                    "sample_id": int(trace.sample_ids[i]),
                    "token_id": int(trace.token_ids[i]),
                    "layer": int(trace.layers[i]),
                    "experts": [int(e) for e in trace.experts[i]],
                    "gates": _float_list(trace.gates[i]),
                    "out_norms": _float_list(trace.out_norms[i]),
                    "s": float(trace.contributions[i]),
                },
                sort_keys=True,
            )
        )
    return "\n".join(lines) + "\n"


def read_trace_jsonl(path) -> TraceFile:
    with open(path, "r", encoding="utf-8") as fh:
        return trace_from_jsonl(fh.read())


def trace_from_jsonl(text: str) -> TraceFile:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise FormatError("JSON-Lines trace is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"JSON-Lines trace header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("type") != "header":
        raise FormatError("first JSON-Lines line must be the header object")
    version = header.get("version")
    if version != TRACE_FORMAT_VERSION:
        raise VersionMismatchError(
            f"unsupported trace format version {version}, expected {TRACE_FORMAT_VERSION}"
        )
    required = (
        "fingerprint",
        "domain",
        "num_layers",
        "num_experts",
        "top_k",
        "hidden_dim",
        "tokens_per_sample",
    )
    missing = [key for key in required if key not in header]
    if missing:
        raise FormatError(f"JSON-Lines header is missing fields: {missing}")
    records = []
    for ln, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {ln} is not valid JSON: {exc}") from exc
        try:
            acts = list(zip(obj["experts"], obj["gates"], obj["out_norms"]))
            records.append(
                (obj["sample_id"], obj["token_id"], obj["layer"], acts, obj["s"])
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"line {ln} is missing record fields: {exc}") from exc
    return make_trace(
        num_layers=int(header["num_layers"]),
        num_experts=int(header["num_experts"]),
        top_k=int(header["top_k"]),
        hidden_dim=int(header["hidden_dim"]),
        domain=str(header["domain"]),
        fingerprint=int(header["fingerprint"]),
        tokens_per_sample=header["tokens_per_sample"],
        records=records,
    )
