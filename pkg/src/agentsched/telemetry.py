"""Unified telemetry stream: boundary events, EMA estimators, pressure flags.

Both planes observe the system through one structure. Events carry the
boundary facts (a round was submitted, a tool started, blocks were freed);
the Telemetry value folds them into counters and keeps slow-moving derived
state (EMA of tool durations, dual overload flags with hysteresis).

Counter updates are event-driven and constant-time. The simulation loop
additionally syncs ground truth from the pool and tool plane once per tick
via probe(), so projection drift from gpu_submit debits never accumulates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

from .engine import ContractViolation, EventLog, KvPool, ToolPlane

K_EMA_SMOOTHING = 0.3
K_HYSTERESIS_WINDOW = 3
K_CPU_HIGH_FRACTION = 0.90
K_CPU_LOW_FRACTION = 0.70
K_KV_HIGH_WATERMARK = 0.90
K_KV_LOW_WATERMARK = 0.70

TELEMETRY_EVENT_KINDS = (
    "gpu_submit",
    "gpu_1st_token",
    "gpu_end",
    "tool_num",
    "tool_start",
    "tool_end",
    "window_update",
)


@dataclass(frozen=True)
class PressureConfig:
    """Thresholds and persistence window for the dual overload flags."""

    cpu_high_fraction: float = K_CPU_HIGH_FRACTION
    cpu_low_fraction: float = K_CPU_LOW_FRACTION
    kv_high_watermark: float = K_KV_HIGH_WATERMARK
    kv_low_watermark: float = K_KV_LOW_WATERMARK
    hysteresis_window: int = K_HYSTERESIS_WINDOW
    ema_smoothing: float = K_EMA_SMOOTHING
    initial_tool_estimate_s: float = 5.0

    def __post_init__(self) -> None:
        if not (0 < self.cpu_low_fraction < self.cpu_high_fraction):
            raise ValueError("cpu thresholds need 0 < low < high")
        if not (0 < self.kv_low_watermark < self.kv_high_watermark):
            raise ValueError("kv watermarks need 0 < low < high")
        if self.hysteresis_window < 1:
            raise ValueError("hysteresis window must be >= 1")


def ema_update(current: float, sample: float, smoothing: float) -> float:
    """One exponential-moving-average step."""
    if not (0 < smoothing <= 1):
        raise ContractViolation(f"smoothing must be in (0, 1], got {smoothing}")
    return smoothing * sample + (1.0 - smoothing) * current


@dataclass
class Telemetry:
    """Single-writer telemetry value; consumers take immutable snapshots."""

    total_blocks: int
    available_kv: int = 0
    kv_usage_ratio: float = 0.0
    active_tools: int = 0
    queued_tools: int = 0
    ema_tool_duration: Optional[float] = None
    ema_blocks_per_session: Optional[float] = None
    active_sessions: int = 0
    cpu_overloaded: bool = False
    kv_overloaded: bool = False
    last_window_update: float = 0.0
    last_w_adm: Optional[float] = None
    # hysteresis persistence counters
    cpu_high_streak: int = 0
    cpu_low_streak: int = 0
    kv_high_streak: int = 0
    kv_low_streak: int = 0
    # seed for ema_blocks_per_session before any round completes
    blocks_seed: Optional[float] = None

    def __post_init__(self) -> None:
        if self.available_kv == 0:
            self.available_kv = self.total_blocks

    # -- event fold ---------------------------------------------------------

    def record(self, kind: str, payload: dict, smoothing: float = K_EMA_SMOOTHING) -> None:
        """Folds one boundary event into the counters.

        gpu_submit debits projected capacity, gpu_end credits freed blocks,
        tool_start/tool_end track the active count, tool_end feeds the
        duration EMA, window_update stores the published window.
        """
        if kind not in TELEMETRY_EVENT_KINDS:
            raise ContractViolation(f"unknown telemetry event kind {kind!r}")
        if kind == "tool_start":
            self.active_tools += 1
        elif kind == "tool_end":
            self.active_tools -= 1
            sample = float(payload["duration_s"])
            if self.ema_tool_duration is None:
                self.ema_tool_duration = sample
            else:
                self.ema_tool_duration = ema_update(self.ema_tool_duration, sample, smoothing)
        elif kind == "gpu_end":
            self.available_kv += int(payload["freed_blocks"])
        elif kind == "gpu_submit":
            self.available_kv -= int(payload["projected_blocks"])
        elif kind == "window_update":
            self.last_w_adm = float(payload["w_adm"])
        # gpu_1st_token and tool_num carry information already tracked

    # -- estimators ----------------------------------------------------------

    def effective_tool_estimate(self, config: PressureConfig) -> float:
        """EMA tool duration, or the configured prior before the first sample."""
        if self.ema_tool_duration is None:
            return config.initial_tool_estimate_s
        return self.ema_tool_duration

    def note_round_blocks(self, blocks: int, smoothing: float = K_EMA_SMOOTHING) -> None:
        """Feeds the per-session block footprint EMA with a finished round."""
        sample = float(blocks)
        if self.ema_blocks_per_session is None:
            self.ema_blocks_per_session = sample
        else:
            self.ema_blocks_per_session = ema_update(
                self.ema_blocks_per_session, sample, smoothing
            )

    def seed_blocks_estimate(self, estimate: float) -> None:
        self.blocks_seed = estimate

    def effective_blocks_per_session(self) -> float:
        if self.ema_blocks_per_session is not None:
            return self.ema_blocks_per_session
        if self.blocks_seed is not None:
            return self.blocks_seed
        return 1.0

    # -- ground-truth sync ----------------------------------------------------

    def probe(self, pool: KvPool, plane: ToolPlane, active_sessions: int) -> None:
        """Syncs counters from the pool and tool plane (cheap direct reads)."""
        self.available_kv = pool.free_blocks
        self.kv_usage_ratio = pool.usage_ratio()
        self.active_tools = plane.active_count()
        self.queued_tools = plane.queued_count()
        self.active_sessions = active_sessions

    def snapshot(self) -> dict:
        return {
            "available_kv": self.available_kv,
            "kv_usage_ratio": self.kv_usage_ratio,
            "active_tools": self.active_tools,
            "queued_tools": self.queued_tools,
            "ema_tool_duration_s": self.ema_tool_duration,
            "ema_blocks_per_session": self.ema_blocks_per_session,
            "active_sessions": self.active_sessions,
            "cpu_overloaded": self.cpu_overloaded,
            "kv_overloaded": self.kv_overloaded,
        }


def refresh_pressure(state: Telemetry, config: PressureConfig, worker_slots: int) -> None:
    """Re-evaluates both overload flags with two-threshold hysteresis.

    A flag flips on only after its high condition holds for
    hysteresis_window consecutive refreshes, and flips off only after the
    low condition holds for the same number of refreshes. Samples between
    the thresholds reset the streak counters and leave the flag alone.
    """
    cpu_high = (
        state.active_tools >= config.cpu_high_fraction * worker_slots
        or state.queued_tools > 0
    )
    cpu_low = (
        state.active_tools < config.cpu_low_fraction * worker_slots
        and state.queued_tools == 0
    )
    state.cpu_high_streak = state.cpu_high_streak + 1 if cpu_high else 0
    state.cpu_low_streak = state.cpu_low_streak + 1 if cpu_low else 0
    if not state.cpu_overloaded and state.cpu_high_streak >= config.hysteresis_window:
        state.cpu_overloaded = True
        state.cpu_low_streak = 0
    elif state.cpu_overloaded and state.cpu_low_streak >= config.hysteresis_window:
        state.cpu_overloaded = False
        state.cpu_high_streak = 0

    kv_high = state.kv_usage_ratio >= config.kv_high_watermark
    kv_low = state.kv_usage_ratio < config.kv_low_watermark
    state.kv_high_streak = state.kv_high_streak + 1 if kv_high else 0
    state.kv_low_streak = state.kv_low_streak + 1 if kv_low else 0
    if not state.kv_overloaded and state.kv_high_streak >= config.hysteresis_window:
        state.kv_overloaded = True
        state.kv_low_streak = 0
    elif state.kv_overloaded and state.kv_low_streak >= config.hysteresis_window:
        state.kv_overloaded = False
        state.kv_high_streak = 0


def has_kv_slack(state: Telemetry, config: PressureConfig) -> bool:
    """Slack predicate used by the admission window's additive branch."""
    return state.kv_usage_ratio < config.kv_low_watermark


def emit_snapshot(log: EventLog, t: float, state: Telemetry) -> None:
    """Writes a telemetry snapshot record to the JSONL stream."""
    log.emit(t, "telemetry", None, **state.snapshot())
