"""Loose speculative-decoding verification for video language models.

Replay captured or synthetic decode traces under strict and loose
verification strategies, score drafted tokens by visual relevance,
and compare empirical accepted lengths against closed-form theory.
"""
from .domain import (
    ENCODING_F32,
    ENCODING_JSON,
    FORMAT_VERSION,
    Decision,
    DecodeStep,
    HiddenMatrix,
    ReplayMetrics,
    StepVerdict,
    StrategyConfig,
    StrategyKind,
    Token,
    Trace,
    TraceHeader,
    Violation,
    validate_trace,
)
from .errors import (
    ChecksumMismatch,
    ConfigError,
    DomainError,
    EmptyStrategyList,
    EncodingError,
    EngineError,
    MissingEntropy,
    MissingHidden,
    ParseError,
    TraceIoError,
    TraceStrategyMismatch,
    ValidationFailed,
    VerdictTraceMismatch,
    VersionUnsupported,
    ZeroNormRow,
)
from .relevance import (
    RelaxedIndexSet,
    RelevanceScorer,
    RelevanceScores,
    cosine_matrix,
    relaxed_count,
    relaxed_indices,
    visual_relevance,
)
from .synthetic import (
    SWEEP_CSV_COLUMNS,
    DilutionReport,
    OracleRelaxedStrategy,
    StrategyStat,
    SweepResult,
    SyntheticConfig,
    derive_seed,
    dilution_check,
    generate_trace,
    replay_any,
    replay_oracle,
    run_sweep,
    sweep_csv,
)
from .theory import (
    ScalingRatio,
    TheoryParams,
    effective_alignment,
    expected_tau_loose,
    expected_tau_strict,
    scaling_ratio,
    speedup_model,
    strict_acceptance_bound,
)
from .traceio import TraceReader, TraceWriter, read_trace, write_trace
from .verification import (
    BoundStrategy,
    LooseningReport,
    ReplayResult,
    StepResult,
    bind_strategy,
    collect_metrics,
    iter_events,
    loosening_report,
    replay_trace,
    select_tree_branch,
    verify_step,
    verify_with_relaxed_set,
)

__version__ = "0.1.0"
