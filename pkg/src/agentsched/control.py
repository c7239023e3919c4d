"""External control plane: queue packing, AIMD admission window, admit step.

The controller decides how many sessions may be active in the data plane at
once. It adapts a fractional window multiplicatively downward under overload
and additively upward under slack, then clamps it against two instantaneous
capacity estimates (CPU tool slots, KV headroom) before admitting from the
front of the packed queue.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import List, Optional

from .engine import Call, ContractViolation, EventLog, SimClock, blocks_for_tokens
from .telemetry import PressureConfig, Telemetry, has_kv_slack

K_W_MIN = 2
K_AIMD_INCREASE = 1.0
K_AIMD_DECREASE = 0.5
K_CONTROL_INTERVAL_S = 2.0
K_INITIAL_WINDOW = 8.0
K_CPU_OVERSUBSCRIPTION = 1.5
K_RESERVE_FRACTION = 0.10
K_LONG_SESSION_FRACTION = 0.25


@dataclass(frozen=True)
class ControllerConfig:
    w_min: int = K_W_MIN
    aimd_increase: float = K_AIMD_INCREASE
    aimd_decrease: float = K_AIMD_DECREASE
    control_interval_s: float = K_CONTROL_INTERVAL_S
    initial_window: float = K_INITIAL_WINDOW
    cpu_oversubscription: float = K_CPU_OVERSUBSCRIPTION
    reserve_fraction: float = K_RESERVE_FRACTION
    long_session_fraction: float = K_LONG_SESSION_FRACTION

    def __post_init__(self) -> None:
        if self.w_min < 1:
            raise ValueError("w_min must be >= 1")
        if not (0 < self.aimd_decrease < 1):
            raise ValueError("aimd_decrease must be in (0, 1)")
        if self.aimd_increase <= 0:
            raise ValueError("aimd_increase must be > 0")
        if self.initial_window < self.w_min:
            raise ValueError("initial window below w_min")


@dataclass
class ControllerState:
    """Fractional admission window plus its AIMD bookkeeping."""

    config: ControllerConfig
    w_adm: float = field(init=False)
    last_update: float = 0.0

    def __post_init__(self) -> None:
        self.w_adm = self.config.initial_window


@dataclass
class QueueEntry:
    call: Call
    req_blocks: int
    is_long_session: bool
    enqueue_time: float

    def __post_init__(self) -> None:
        if self.req_blocks < 1:
            raise ContractViolation("queue entry needs req_blocks >= 1")


def estimate_blocks(prefill_len: int, block_size: int) -> int:
    """Projected KV blocks for a pending round, from its prefill length."""
    if prefill_len < 1:
        raise ContractViolation("prefill_len must be >= 1")
    return blocks_for_tokens(prefill_len, block_size)


def make_queue_entry(
    call: Call, total_blocks: int, block_size: int, config: ControllerConfig, now: float
) -> QueueEntry:
    prefill_len = call.rounds[0].new_prefill_tokens
    req = estimate_blocks(prefill_len, block_size)
    return QueueEntry(
        call=call,
        req_blocks=req,
        is_long_session=req > config.long_session_fraction * total_blocks,
        enqueue_time=now,
    )


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------


def pack_queue(queue: List[QueueEntry], telemetry: Telemetry) -> List[QueueEntry]:
    """Reorders the waiting queue by the current pressure picture.

    CPU overload prefers big requests first (they spend proportionally more
    of their life on the GPU, relieving the tool plane). A queue of only
    long sessions is packed first-fit against available KV. Otherwise small
    requests go first. All sorts are stable in enqueue order.
    """
    if telemetry.cpu_overloaded:
        return sorted(queue, key=lambda e: -e.req_blocks)
    if queue and all(e.is_long_session for e in queue):
        fits: List[QueueEntry] = []
        deferred: List[QueueEntry] = []
        capacity = telemetry.available_kv
        for entry in queue:
            if entry.req_blocks <= capacity:
                fits.append(entry)
                capacity -= entry.req_blocks
            else:
                deferred.append(entry)
        return fits + deferred
    return sorted(queue, key=lambda e: e.req_blocks)


# ---------------------------------------------------------------------------
# Capacity estimates and the AIMD window
# ---------------------------------------------------------------------------


def calc_cpu_limit(telemetry: Telemetry, worker_slots: int, config: ControllerConfig) -> float:
    raw = worker_slots * config.cpu_oversubscription - telemetry.queued_tools
    return max(float(config.w_min), raw)


def calc_kv_limit(telemetry: Telemetry, config: ControllerConfig) -> float:
    per_session = max(telemetry.effective_blocks_per_session(), 1.0)
    cap = math.floor(telemetry.available_kv * (1.0 - config.reserve_fraction) / per_session)
    return max(float(config.w_min), cap + telemetry.active_sessions)


def update_window(
    state: ControllerState,
    telemetry: Telemetry,
    worker_slots: int,
    pressure: PressureConfig,
    now: float,
) -> int:
    """AIMD step (if a control interval elapsed) plus the triple clamp.

    Returns the integer admission limit min(w_adm, cpu, kv), floor division
    to whole sessions.
    """
    cfg = state.config
    if now - state.last_update >= cfg.control_interval_s:
        overloaded = telemetry.cpu_overloaded or telemetry.kv_overloaded
        if overloaded:
            state.w_adm = max(float(cfg.w_min), state.w_adm * cfg.aimd_decrease)
        elif has_kv_slack(telemetry, pressure):
            state.w_adm = state.w_adm + cfg.aimd_increase
        state.last_update = now
    cpu_limit = calc_cpu_limit(telemetry, worker_slots, cfg)
    kv_limit = calc_kv_limit(telemetry, cfg)
    return int(min(state.w_adm, cpu_limit, kv_limit))


def balance_and_admit(
    queue: List[QueueEntry],
    state: ControllerState,
    telemetry: Telemetry,
    worker_slots: int,
    pressure: PressureConfig,
    clock: SimClock,
    log: Optional[EventLog] = None,
) -> List[QueueEntry]:
    """Packs the queue, refreshes the window, admits from the front.

    Mutates `queue` in place (packed order, admitted entries removed) and
    returns the admitted entries. Emits one window_update event per
    invocation.
    """
    now = clock.now
    if telemetry.ema_blocks_per_session is None and telemetry.blocks_seed is None and queue:
        telemetry.seed_blocks_estimate(statistics.median(e.req_blocks for e in queue))

    packed = pack_queue(queue, telemetry)
    limit = update_window(state, telemetry, worker_slots, pressure, now)
    slots = limit - telemetry.active_sessions
    take = min(slots, len(packed)) if slots > 0 else 0
    admitted = packed[:take]
    queue[:] = packed[take:]

    if log is not None:
        log.emit(
            now,
            "window_update",
            None,
            w_adm=state.w_adm,
            limit=limit,
            slots=slots,
            admitted=[e.call.session_id for e in admitted],
            cpu_overloaded=telemetry.cpu_overloaded,
            kv_overloaded=telemetry.kv_overloaded,
        )
        telemetry.record(
            "window_update", {"w_adm": state.w_adm}, smoothing=pressure.ema_smoothing
        )
        telemetry.last_window_update = now
    return admitted
