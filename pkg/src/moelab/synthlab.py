"""Synthetic multi-domain fixtures with planted domain-specific experts.

A domain is a Gaussian token cluster plus a set of experts per layer whose
router rows are overwritten to point at the cluster mean, so tokens from
the cluster preferentially route to the planted experts. This makes
few-shot localization claims testable at desk scale: scoring a short
calibration stream should rediscover the planted sets.

The default fixture (4 layers, 32 experts, top-4, two domains with 8
planted experts per layer each) is committed as package data; its plant
strength was selected by ``calibrate_plant_strength`` as the smallest
candidate at which every planted expert's gating score beats every
non-planted expert's, layer by layer, on a 25-sample stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .model import LayerWeights, ModelConfig, MoeModel, build_model
from .scoring import score_gating
from .trace import capture_trace

FIXTURE_FORMAT = "moelab-fixture"
FIXTURE_VERSION = 1

MAX_MEAN_COSINE = 0.9
PLANT_NOISE_SCALE = 0.02  # relative to the plant strength


@dataclass(frozen=True)
class DomainSpec:
    """One synthetic domain: token cluster plus planted experts per layer."""

    name: str
    cluster_mean: np.ndarray  # (D,)
    cluster_spread: float
    planted: tuple[tuple[int, ...], ...]  # per layer
    plant_strength: float

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "cluster_mean", np.asarray(self.cluster_mean, dtype=np.float64)
        )
        if self.cluster_mean.ndim != 1:
            raise ValidationError("cluster_mean must be a vector")
        if np.linalg.norm(self.cluster_mean) < 1e-12:
            raise ValidationError("cluster_mean must be nonzero")
        if self.cluster_spread < 0:
            raise ValidationError("cluster_spread must be nonnegative")
        if self.plant_strength < 0:
            raise ValidationError("plant_strength must be nonnegative")
        object.__setattr__(
            self,
            "planted",
            tuple(tuple(sorted(int(e) for e in layer)) for layer in self.planted),
        )


def validate_domains(config: ModelConfig, domains: Sequence[DomainSpec]) -> None:
    names = [d.name for d in domains]
    if len(set(names)) != len(names):
        raise ValidationError("domain names must be unique")
    for d in domains:
        if d.cluster_mean.shape != (config.hidden_dim,):
            raise ValidationError(
                f"domain {d.name!r} cluster_mean has shape {d.cluster_mean.shape}, "
                f"expected ({config.hidden_dim},)"
            )
        if len(d.planted) != config.num_layers:
            raise ValidationError(
                f"domain {d.name!r} has planted sets for {len(d.planted)} layers, "
                f"model has {config.num_layers}"
            )
        for li, layer in enumerate(d.planted):
            if layer and (layer[0] < 0 or layer[-1] >= config.num_experts):
                raise ValidationError(
                    f"domain {d.name!r} layer {li} planted indices out of range"
                )
    for i in range(len(domains)):
        for j in range(i + 1, len(domains)):
            a, b = domains[i].cluster_mean, domains[j].cluster_mean
            cosine = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
            if abs(cosine) >= MAX_MEAN_COSINE:
                raise ValidationError(
                    f"cluster means of {domains[i].name!r} and {domains[j].name!r} "
                    f"are nearly collinear (cosine {cosine:.3f})"
                )


def gen_planted_model(
    config: ModelConfig, domains: Sequence[DomainSpec], seed: int
) -> MoeModel:
    """Build a random model, then point planted experts' router rows at their domain.

    Each planted row becomes strength * (unit cluster mean) plus small seeded
    noise. The noise is projected orthogonal to the cluster mean, so which
    planted experts win the top-K rotates with the token noise instead of a
    fixed per-expert bias. A zero plant strength leaves the model untouched.
    """
    validate_domains(config, domains)
    model = build_model(config)
    rng = np.random.default_rng(seed)
    routers = [lw.router.copy() for lw in model.layers]
    dim = config.hidden_dim
    for domain in domains:
        if domain.plant_strength == 0.0:
            continue
        unit = domain.cluster_mean / np.linalg.norm(domain.cluster_mean)
        for layer_index, experts in enumerate(domain.planted):
            for expert in experts:
                noise = rng.standard_normal(dim) / np.sqrt(dim)
                noise -= (noise @ unit) * unit
                row = domain.plant_strength * (unit + PLANT_NOISE_SCALE * noise)
                routers[layer_index][expert] = row.astype(np.float32)
    layers = tuple(
        LayerWeights(router=routers[i], w1=lw.w1, w2=lw.w2)
        for i, lw in enumerate(model.layers)
    )
    return MoeModel(config=config, layers=layers, expert_mask=model.expert_mask.copy())


def gen_domain_stream(
    domain: DomainSpec, num_samples: int, tokens_per_sample: int, seed: int
) -> list[np.ndarray]:
    """Seeded token sequences: cluster mean plus spread-scaled Gaussian noise."""
    if num_samples < 1 or tokens_per_sample < 1:
        raise ValidationError("num_samples and tokens_per_sample must be >= 1")
    rng = np.random.default_rng(seed)
    dim = domain.cluster_mean.shape[0]
    return [
        domain.cluster_mean
        + domain.cluster_spread * rng.standard_normal((tokens_per_sample, dim))
        for _ in range(num_samples)
    ]


# ---------------------------------------------------------------------------
# fixtures


@dataclass(frozen=True)
class Fixture:
    """A committed synthetic setup: model config, domains, stream defaults."""

    config: ModelConfig
    planting_seed: int
    domains: tuple[DomainSpec, ...]
    stream_samples: int
    stream_tokens: int
    stream_seeds: dict[str, int]

    def domain(self, name: str) -> DomainSpec:
        for d in self.domains:
            if d.name == name:
                return d
        raise ValidationError(f"fixture has no domain named {name!r}")

    def model(self) -> MoeModel:
        return gen_planted_model(self.config, self.domains, self.planting_seed)

    def stream(
        self,
        name: str,
        num_samples: int | None = None,
        tokens_per_sample: int | None = None,
        seed: int | None = None,
    ) -> list[np.ndarray]:
        d = self.domain(name)
        return gen_domain_stream(
            d,
            num_samples if num_samples is not None else self.stream_samples,
            tokens_per_sample if tokens_per_sample is not None else self.stream_tokens,
            seed if seed is not None else self.stream_seeds[name],
        )


def fixture_to_json(fixture: Fixture, extra: dict | None = None) -> str:
    cfg = fixture.config
    payload = {
        "format": FIXTURE_FORMAT,
        "version": FIXTURE_VERSION,
        "model": {
            "num_layers": cfg.num_layers,
            "num_experts": cfg.num_experts,
            "top_k": cfg.top_k,
            "hidden_dim": cfg.hidden_dim,
            "expert_inner_dim": cfg.expert_inner_dim,
            "seed": cfg.seed,
        },
        "planting_seed": fixture.planting_seed,
        "domains": [
            {
                "name": d.name,
                "cluster_mean": [float(v) for v in d.cluster_mean],
                "cluster_spread": d.cluster_spread,
                "planted": [list(layer) for layer in d.planted],
                "plant_strength": d.plant_strength,
            }
            for d in fixture.domains
        ],
        "streams": {
            "num_samples": fixture.stream_samples,
            "tokens_per_sample": fixture.stream_tokens,
            "seeds": fixture.stream_seeds,
        },
    }
    if extra:
        payload["calibration"] = extra
    return json.dumps(payload, sort_keys=True, indent=1)


def fixture_from_json(text: str) -> Fixture:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"fixture is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FIXTURE_FORMAT:
        raise FormatError("not a fixture JSON document")
    if payload.get("version") != FIXTURE_VERSION:
        raise FormatError(f"unsupported fixture version {payload.get('version')}")
    m = payload["model"]
    config = ModelConfig(
        num_layers=int(m["num_layers"]),
        num_experts=int(m["num_experts"]),
        top_k=int(m["top_k"]),
        hidden_dim=int(m["hidden_dim"]),
        expert_inner_dim=int(m["expert_inner_dim"]),
        seed=int(m["seed"]),
    )
    domains = tuple(
        DomainSpec(
            name=d["name"],
            cluster_mean=np.asarray(d["cluster_mean"], dtype=np.float64),
            cluster_spread=float(d["cluster_spread"]),
            planted=tuple(tuple(layer) for layer in d["planted"]),
            plant_strength=float(d["plant_strength"]),
        )
        for d in payload["domains"]
    )
    streams = payload["streams"]
    fixture = Fixture(
        config=config,
        planting_seed=int(payload["planting_seed"]),
        domains=domains,
        stream_samples=int(streams["num_samples"]),
        stream_tokens=int(streams["tokens_per_sample"]),
        stream_seeds={k: int(v) for k, v in streams["seeds"].items()},
    )
    validate_domains(config, fixture.domains)
    return fixture


def write_fixture(fixture: Fixture, path, extra: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(fixture_to_json(fixture, extra))
        fh.write("\n")


def read_fixture(path) -> Fixture:
    with open(path, "r", encoding="utf-8") as fh:
        return fixture_from_json(fh.read())


def load_default_fixture() -> Fixture:
    """The committed two-domain desk-scale fixture shipped with the package."""
    text = resources.files("moelab").joinpath("fixtures/default.json").read_text("utf-8")
    return fixture_from_json(text)


def build_default_fixture(plant_strength: float) -> Fixture:
    """Deterministically construct the default fixture at a given plant strength.

    Two domains with orthogonalized unit cluster means and disjoint planted
    sets of 8 experts per layer, over a 4-layer, 32-expert, top-4 model.
    """
    config = ModelConfig(
        num_layers=4,
        num_experts=32,
        top_k=4,
        hidden_dim=16,
        expert_inner_dim=32,
        seed=2024,
    )
    mean_norm = 2.0  # large vs spread*sqrt(D) keeps off-plan routing negligible
    rng = np.random.default_rng(777)
    mean_a = rng.standard_normal(config.hidden_dim)
    mean_a *= mean_norm / np.linalg.norm(mean_a)
    raw_b = rng.standard_normal(config.hidden_dim)
    raw_b -= (raw_b @ mean_a) * mean_a / (mean_norm**2)
    mean_b = raw_b * (mean_norm / np.linalg.norm(raw_b))

    planted_a = []
    planted_b = []
    for _ in range(config.num_layers):
        perm = rng.permutation(config.num_experts)
        planted_a.append(tuple(sorted(int(e) for e in perm[:8])))
        planted_b.append(tuple(sorted(int(e) for e in perm[8:16])))

    spread = 0.25
    domains = (
        DomainSpec(
            name="alpha",
            cluster_mean=mean_a,
            cluster_spread=spread,
            planted=tuple(planted_a),
            plant_strength=plant_strength,
        ),
        DomainSpec(
            name="beta",
            cluster_mean=mean_b,
            cluster_spread=spread,
            planted=tuple(planted_b),
            plant_strength=plant_strength,
        ),
    )
    return Fixture(
        config=config,
        planting_seed=4181,
        domains=domains,
        stream_samples=25,
        stream_tokens=64,
        stream_seeds={"alpha": 1001, "beta": 2002},
    )


def rank_dominance_holds(
    model: MoeModel, domain: DomainSpec, stream: Sequence[np.ndarray]
) -> bool:
    """True when every planted expert's gating score beats every non-planted one's,
    at every layer, on the given stream."""
    trace = capture_trace(model, stream, domain.name)
    table = score_gating(trace)
    for layer_index, planted in enumerate(domain.planted):
        planted_idx = np.asarray(planted, dtype=np.int64)
        others = np.setdiff1d(
            np.arange(model.config.num_experts, dtype=np.int64), planted_idx
        )
        if table.scores[layer_index][planted_idx].min() < table.scores[layer_index][others].max():
            return False
    return True


def calibrate_plant_strength(candidates: Sequence[float]) -> tuple[float, list[float]]:
    """Sweep plant-strength candidates, return the smallest with rank dominance.

    Dominance must hold for every domain of the default fixture construction
    on its default 25-sample stream. Returns (selected, tried).
    """
    tried: list[float] = []
    for strength in sorted(candidates):
        tried.append(float(strength))
        fixture = build_default_fixture(float(strength))
        model = fixture.model()
        if all(
            rank_dominance_holds(model, d, fixture.stream(d.name)) for d in fixture.domains
        ):
            return float(strength), tried
    raise ValidationError(
        f"no candidate plant strength in {list(candidates)} achieves rank dominance"
    )
