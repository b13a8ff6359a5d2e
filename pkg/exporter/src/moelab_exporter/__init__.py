"""moelab-exporter: trace real MoE checkpoints into the moelab JSON-Lines format."""

from .export import (
    CapturedSample,
    ExportConfig,
    ExporterError,
    MoeBlockHandle,
    capture_sample,
    checkpoint_fingerprint,
    discover_moe_blocks,
    expert_output,
    export_trace,
)

__version__ = "0.1.0"
