"""Deterministic co-scheduling simulator for agentic LLM serving workloads.

The package splits into a physical substrate (engine), observation
(telemetry), admission control (control), the data-plane scheduler
(scheduler), policy objects (baselines), workload generation (workload),
evaluation (metrics, audits), the run loop (sim), and the experiment driver
(cli, config).
"""

from .audits import (
    audit_admission_bounds,
    audit_budget_compliance,
    audit_fcfs_order,
    audit_kv_conservation,
    audit_phase_legality,
    audit_pinned_residency,
    audit_tool_fifo,
    audit_warm_cold_accounting,
    run_standard_audits,
)
from .baselines import (
    POLICY_KINDS,
    FcfsPolicy,
    MarsPolicy,
    PolicyBase,
    ProgramPriorityPolicy,
    TtlPolicy,
    make_policy,
)
from .config import (
    AblationFlags,
    ConfigError,
    ExperimentConfig,
    config_hash,
    experiment_from_dict,
    load_experiment_config,
    substrate_hash,
)
from .control import (
    ControllerConfig,
    ControllerState,
    QueueEntry,
    balance_and_admit,
    calc_cpu_limit,
    calc_kv_limit,
    estimate_blocks,
    make_queue_entry,
    pack_queue,
    update_window,
)
from .engine import (
    Call,
    ContractViolation,
    EventLog,
    GpuModel,
    KvPool,
    Phase,
    SimClock,
    ToolPlane,
    blocks_for_tokens,
    resume_cost,
    step_gpu,
    submit_round,
)
from .metrics import (
    CompletionRecord,
    GoodputConfig,
    GoodputSeries,
    LogIntegrityError,
    build_completion_records,
    compute_goodput,
    compute_ideal_time,
    compute_ideal_times,
    eviction_series,
    latency_summary,
    percentile,
    ttft_per_round,
    write_summary_csv,
)
from .scheduler import (
    MlfqConfig,
    PinnedSession,
    PriorityState,
    RetentionConfig,
    RetentionDecision,
    TickPlan,
    Victim,
    build_plan,
    charge_service,
    decide_retention,
    initial_level,
    pressure_weight,
    promote_waiting,
    reclaim_for,
    select_batch,
    try_fit,
)
from .sim import EngineParams, RunResult, SimulationStall, run_simulation
from .telemetry import (
    PressureConfig,
    Telemetry,
    ema_update,
    emit_snapshot,
    has_kv_slack,
    refresh_pressure,
)
from .workload import (
    RegimeConfig,
    RoundSpec,
    SessionTrace,
    TraceFormatError,
    ValidationReport,
    Violation,
    WorkloadConfigError,
    generate_workload,
    load_trace,
    regime_preset,
    save_trace,
    validate_trace,
)

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "Call",
    "CompletionRecord",
    "ConfigError",
    "ContractViolation",
    "ControllerConfig",
    "ControllerState",
    "EngineParams",
    "EventLog",
    "ExperimentConfig",
    "FcfsPolicy",
    "GoodputConfig",
    "GoodputSeries",
    "GpuModel",
    "KvPool",
    "LogIntegrityError",
    "MarsPolicy",
    "MlfqConfig",
    "POLICY_KINDS",
    "Phase",
    "PinnedSession",
    "PolicyBase",
    "PressureConfig",
    "PriorityState",
    "ProgramPriorityPolicy",
    "QueueEntry",
    "RegimeConfig",
    "RetentionConfig",
    "RetentionDecision",
    "RoundSpec",
    "RunResult",
    "SessionTrace",
    "SimClock",
    "SimulationStall",
    "Telemetry",
    "TickPlan",
    "ToolPlane",
    "TraceFormatError",
    "TtlPolicy",
    "ValidationReport",
    "Victim",
    "Violation",
    "WorkloadConfigError",
    "audit_admission_bounds",
    "audit_budget_compliance",
    "audit_fcfs_order",
    "audit_kv_conservation",
    "audit_phase_legality",
    "audit_pinned_residency",
    "audit_tool_fifo",
    "audit_warm_cold_accounting",
    "balance_and_admit",
    "blocks_for_tokens",
    "build_completion_records",
    "build_plan",
    "calc_cpu_limit",
    "calc_kv_limit",
    "charge_service",
    "compute_goodput",
    "compute_ideal_time",
    "compute_ideal_times",
    "config_hash",
    "decide_retention",
    "ema_update",
    "emit_snapshot",
    "estimate_blocks",
    "eviction_series",
    "experiment_from_dict",
    "generate_workload",
    "has_kv_slack",
    "initial_level",
    "latency_summary",
    "load_experiment_config",
    "load_trace",
    "make_policy",
    "make_queue_entry",
    "pack_queue",
    "percentile",
    "pressure_weight",
    "promote_waiting",
    "reclaim_for",
    "refresh_pressure",
    "regime_preset",
    "resume_cost",
    "run_simulation",
    "run_standard_audits",
    "save_trace",
    "select_batch",
    "step_gpu",
    "submit_round",
    "substrate_hash",
    "try_fit",
    "ttft_per_round",
    "update_window",
    "validate_trace",
    "write_summary_csv",
]
