"""Tree-speculative pipelined decoding for a deterministic toy decoder."""

from .errors import (
    ConfigError,
    ContractViolation,
    DraftExhausted,
    InvalidTokenError,
    InvariantViolation,
    OrderingError,
    ShapeError,
    SourceUnavailable,
    TraceParseError,
    TreePipeError,
    TreeStructureError,
)
from .tree import (
    SpecTree,
    SurvivorMask,
    bottom_level,
    cumulative_prob,
    decode,
    encode,
    layer_append,
    level_snapshot,
    mask_column,
    mask_row,
    new_root,
    structurally_equal,
    to_subtree_prune,
    validate,
)
from .model import (
    KvCache,
    ToyModel,
    ToyModelConfig,
    forward_tree,
    init_model,
    kv_prune,
    lcg_uniform_stream,
    load_checkpoint,
    save_checkpoint,
    sequential_decode,
)
from .token_source import (
    BeamConfig,
    DraftProvider,
    RecordingDraft,
    ReplayDraft,
    SyntheticDraft,
    SyntheticDraftConfig,
    expand_fixed_width,
    load_trace,
    synthetic_draft,
    write_trace,
)
from .perf import (
    AccuracyCurve,
    CadenceStats,
    CostModel,
    expected_tbt_general,
    expected_tbt_uniform,
    fit_accuracy_curve,
    select_width,
    simulate_cadence,
    step_cost,
)
from .pipeline import (
    LevelPayload,
    PipelineConfig,
    PipelineRunner,
    RunMetrics,
    RunResult,
    StepOutcome,
    run,
    run_vanilla,
    split_layers,
    write_trace_csv,
)

__version__ = "0.1.0"
