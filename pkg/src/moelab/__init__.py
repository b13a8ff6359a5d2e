"""moelab: a desk-scale expert-pruning laboratory for mixture-of-experts models.

Run an instrumented toy MoE, capture calibration traces, score experts with
several importance metrics, build and apply pruning plans, and audit the
structural properties the whole approach rests on.
"""

from .analysis import (
    BoundAuditReport,
    OverlapReport,
    ScatterPoint,
    bound_audit,
    importance_scatter,
    overlap_matrix,
    overlap_top_m,
    reconstruction_error,
    similarity_map,
)
from .errors import (
    ChecksumError,
    FormatError,
    HeaderMismatchError,
    MoelabError,
    NumericsError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)
from .model import (
    LayerForwardRecord,
    LayerWeights,
    ModelConfig,
    MoeModel,
    RoutingOutcome,
    build_model,
    forward_sequence,
    layer_forward,
    model_fingerprint,
    model_from_bytes,
    model_to_bytes,
    models_equal,
    read_model,
    route,
    write_model,
)
from .perturb import SearchResult, exhaustive_search, greedy_search, subset_perturbation
from .pruning import (
    PruningPlan,
    apply_plan,
    domain_exclusive_experts,
    plan_layerwise_dynamic,
    plan_remove_set,
    plan_top_m,
    read_plan,
    top_m_indices,
    write_plan,
)
from .scoring import (
    ExpertScoreTable,
    expert_importance_term,
    read_score_table,
    score_easy_ep,
    score_frequency,
    score_gating,
    score_mixed,
    score_random,
    write_score_table,
)
from .synthlab import (
    DomainSpec,
    Fixture,
    build_default_fixture,
    calibrate_plant_strength,
    gen_domain_stream,
    gen_planted_model,
    load_default_fixture,
    read_fixture,
    write_fixture,
)
from .trace import (
    ExpertActivation,
    TraceFile,
    TraceHeader,
    TraceRecord,
    capture_trace,
    make_trace,
    merge_traces,
    read_trace,
    read_trace_jsonl,
    token_contribution,
    validate_trace,
    write_trace,
    write_trace_jsonl,
)

__version__ = "0.1.0"
