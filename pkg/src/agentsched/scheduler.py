"""Agent-centric data-plane scheduler.

Two cooperating mechanisms:

* a priority-aware coordinator: a windowed multi-level feedback queue keyed
  on initial KV footprint, with token quotas that demote long-served calls
  and bounded promotion for calls that wait too long without service;
* an opportunistic co-scheduler: prefill chunks shrink to whatever the block
  allocator can satisfy, tool departures may pin their KV for a bounded
  interval, and reclamation frees pinned state before preempting any
  running victim, lowest priority and largest footprint first.

Baseline policies reuse build_plan() with their own ordering and eviction
rules, so every policy runs on the same engine code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .engine import (
    Call,
    ContractViolation,
    EventLog,
    GpuModel,
    KvPool,
    Phase,
    blocks_for_tokens,
)
from .telemetry import PressureConfig, Telemetry

K_NUM_LEVELS = 4
K_LEVEL_BOUNDARIES = (4_000, 32_000, 128_000, math.inf)
K_LEVEL_QUOTAS = (2_000, 8_000, 32_000, math.inf)
K_PROMOTION_WAIT_S = 10.0
K_MAX_DECODE_SLOTS = 64
K_DEADLINE_SLACK = 2.0
K_MAX_PIN_HORIZON_S = 60.0
K_PRESSURE_WEIGHT_CLIP = 100.0


@dataclass(frozen=True)
class MlfqConfig:
    num_levels: int = K_NUM_LEVELS
    level_boundaries_tokens: Tuple[float, ...] = K_LEVEL_BOUNDARIES
    level_quotas_tokens: Tuple[float, ...] = K_LEVEL_QUOTAS
    promotion_wait_s: float = K_PROMOTION_WAIT_S
    max_promotions: int = K_NUM_LEVELS - 1
    max_decode_slots: int = K_MAX_DECODE_SLOTS

    def __post_init__(self) -> None:
        if len(self.level_boundaries_tokens) != self.num_levels:
            raise ValueError("one footprint boundary per level required")
        if len(self.level_quotas_tokens) != self.num_levels:
            raise ValueError("one service quota per level required")
        if self.num_levels < 1 or self.promotion_wait_s <= 0:
            raise ValueError("bad MLFQ constants")

    @property
    def window_size(self) -> int:
        return 2 * self.max_decode_slots


@dataclass(frozen=True)
class RetentionConfig:
    deadline_slack: float = K_DEADLINE_SLACK
    max_pin_horizon_s: float = K_MAX_PIN_HORIZON_S
    pressure_weight_clip: float = K_PRESSURE_WEIGHT_CLIP


# ---------------------------------------------------------------------------
# Priority bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class PriorityState:
    level: int
    base_level: int
    served_tokens_at_level: int = 0
    wait_since: float = 0.0
    promotions: int = 0


def initial_level(context_tokens: int, config: MlfqConfig) -> int:
    """Index of the smallest footprint-class boundary covering the context.

    Level 0 is served first; bigger footprints start lower.
    """
    if context_tokens < 1:
        raise ContractViolation("context_tokens must be >= 1")
    for i, boundary in enumerate(config.level_boundaries_tokens):
        if context_tokens <= boundary:
            return i
    return config.num_levels - 1


def charge_service(state: PriorityState, tokens: int, config: MlfqConfig) -> None:
    """Accumulates GPU service; crossing the level quota demotes one level."""
    if tokens < 0:
        raise ContractViolation("cannot charge negative service")
    state.served_tokens_at_level += tokens
    quota = config.level_quotas_tokens[state.level]
    if state.served_tokens_at_level > quota and state.level < config.num_levels - 1:
        state.level += 1
        state.served_tokens_at_level = 0


def promote_waiting(
    states: Iterable[PriorityState], now: float, config: MlfqConfig
) -> List[PriorityState]:
    """Moves starved calls up one level per elapsed wait window.

    Bounded: at most max_promotions per call over its lifetime, and level 0
    is a ceiling. Returns the states that moved.
    """
    promoted = []
    for st in states:
        if st.level == 0 or st.promotions >= config.max_promotions:
            continue
        if now - st.wait_since >= config.promotion_wait_s:
            st.level -= 1
            st.promotions += 1
            st.wait_since = now
            promoted.append(st)
    return promoted


# ---------------------------------------------------------------------------
# Chunk fitting
# ---------------------------------------------------------------------------


def try_fit(call: Call, desired_tokens: int, pool: KvPool, block_size: Optional[int] = None) -> int:
    """Grants the largest prefill chunk the allocator can hold.

    Tries desired_tokens first; when that cannot fit, shrinks to whole-block
    amounts (one block at a time, conceptually) and returns 0 when not even
    one block is available. Allocation happens here on success.
    """
    bs = block_size or pool.block_size
    if desired_tokens < 1:
        raise ContractViolation("desired_tokens must be >= 1")
    held = blocks_for_tokens(call.kv_tokens, bs)
    capacity_tokens = (held + pool.free_blocks) * bs - call.kv_tokens
    if desired_tokens <= capacity_tokens:
        grant = desired_tokens
    else:
        grant = (capacity_tokens // bs) * bs
    if grant < 1:
        return 0
    need = call.incremental_blocks(grant, bs)
    if need > 0 and not pool.allocate(call.session_id, need):
        raise ContractViolation("try_fit sized a grant the pool refused")
    return grant


# ---------------------------------------------------------------------------
# Retention
# ---------------------------------------------------------------------------


@dataclass
class PinnedSession:
    session_id: str
    pinned_blocks: int
    pinned_at: float
    predicted_return: float
    retention_deadline: float
    level: int


@dataclass(frozen=True)
class RetentionDecision:
    pin: bool
    benefit_s: float
    cost_s: float
    retention_deadline: float


def pressure_weight(usage_ratio: float, clip: float = K_PRESSURE_WEIGHT_CLIP) -> float:
    """1/(1-u), clipped: holding memory gets expensive as the pool fills."""
    if usage_ratio >= 1.0:
        return clip
    return min(1.0 / (1.0 - usage_ratio), clip)


def decide_retention(
    call: Call,
    telemetry: Telemetry,
    pool: KvPool,
    gpu: GpuModel,
    config: RetentionConfig,
    pressure: PressureConfig,
    now: float,
) -> RetentionDecision:
    """Weighs warm-resume savings against the cost of holding blocks.

    benefit: seconds of prefix recompute a warm resume avoids.
    cost: footprint share, scaled by how long the tool is expected to run
    and by the memory-pressure weight.
    """
    ema = telemetry.effective_tool_estimate(pressure)
    benefit = call.context_tokens / gpu.prefill_rate
    footprint = call.held_blocks(pool.block_size)
    cost = (footprint / pool.total_blocks) * ema * pressure_weight(
        telemetry.kv_usage_ratio, config.pressure_weight_clip
    )
    pin = benefit > cost and ema <= config.max_pin_horizon_s
    deadline = now + min(ema * config.deadline_slack, config.max_pin_horizon_s)
    return RetentionDecision(pin=pin, benefit_s=benefit, cost_s=cost, retention_deadline=deadline)


# ---------------------------------------------------------------------------
# Reclamation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Victim:
    session_id: str
    kind: str  # "pinned" or "running"
    blocks: int


def reclaim_for(
    needed_blocks: int,
    pool: KvPool,
    pinned_registry: Dict[str, PinnedSession],
    running_calls: Sequence[Call],
    running_levels: Callable[[Call], int],
    now: float,
) -> List[Victim]:
    """Chooses the eviction order that satisfies a block shortfall.

    Pinned sessions go before any running victim; expired deadlines go
    first among the pinned. Within each group, lowest priority level first,
    then largest footprint. Stops at the first prefix whose freed blocks
    (plus blocks already free) cover the need; returns an empty list when
    even evicting everything would not.
    """
    if needed_blocks < 1:
        raise ContractViolation("needed_blocks must be >= 1")
    if pool.free_blocks >= needed_blocks:
        return []
    candidates: List[Tuple[tuple, Victim]] = []
    for ps in pinned_registry.values():
        rank = 0 if ps.retention_deadline < now else 1
        key = (rank, -ps.level, -ps.pinned_blocks, ps.session_id)
        candidates.append((key, Victim(ps.session_id, "pinned", ps.pinned_blocks)))
    for call in running_calls:
        blocks = call.held_blocks(pool.block_size)
        if blocks == 0:
            continue
        key = (2, -running_levels(call), -blocks, call.session_id)
        candidates.append((key, Victim(call.session_id, "running", blocks)))
    candidates.sort(key=lambda kv: kv[0])
    chosen: List[Victim] = []
    freed = 0
    for _, victim in candidates:
        chosen.append(victim)
        freed += victim.blocks
        if pool.free_blocks + freed >= needed_blocks:
            return chosen
    return []


# ---------------------------------------------------------------------------
# Tick plans
# ---------------------------------------------------------------------------


@dataclass
class TickPlan:
    decode_ids: List[str] = field(default_factory=list)
    prefill_grants: List[Tuple[str, int]] = field(default_factory=list)
    evictions: List[Victim] = field(default_factory=list)
    total_tokens: int = 0


def build_plan(
    ready: Sequence[Call],
    pool: KvPool,
    gpu: GpuModel,
    order_key: Callable[[Call], tuple],
    window_size: int,
    max_decode_slots: int,
    shrink_chunks: bool,
    reclaimer: Optional[Callable[[int, Call, Sequence[str]], List[Victim]]],
    evict_victim: Optional[Callable[[Victim], None]],
    strict_order: bool = False,
) -> TickPlan:
    """Shared per-tick plan construction for every policy.

    Walks the window in priority order: decode slots first (one token each),
    then prefill chunks. `reclaimer` proposes victims for a block shortfall
    on behalf of a beneficiary call and may return an empty list to decline;
    `evict_victim` applies one eviction to the pool and the victim's call.
    The pool mutates as the plan forms, so the plan is feasible by
    construction when it is returned.

    strict_order models head-of-line blocking: when a prefill at the front
    of the order cannot get blocks, nothing behind it may start either.
    """
    plan = TickPlan()
    budget = gpu.token_budget_per_tick
    bs = pool.block_size
    window = sorted(ready, key=order_key)[:window_size]
    planned: List[str] = []

    def claim_blocks(needed: int, beneficiary: Call) -> bool:
        if pool.free_blocks >= needed:
            return True
        if reclaimer is None or evict_victim is None:
            return False
        victims = reclaimer(needed, beneficiary, planned)
        if not victims:
            return False
        for v in victims:
            evict_victim(v)
            plan.evictions.append(v)
        return pool.free_blocks >= needed

    decodes = 0
    for call in window:
        if call.phase != Phase.DECODE or call.remaining_decode < 1:
            continue
        if plan.total_tokens >= budget or decodes >= max_decode_slots:
            continue
        need = call.incremental_blocks(1, bs)
        if need > 0:
            if not claim_blocks(need, call):
                continue
            if not pool.allocate(call.session_id, need):
                continue
        plan.decode_ids.append(call.session_id)
        planned.append(call.session_id)
        plan.total_tokens += 1
        decodes += 1

    for call in window:
        if call.phase != Phase.PREFILL:
            continue
        left = budget - plan.total_tokens
        if left < 1:
            break
        desired = min(call.remaining_prefill, left)
        if desired < 1:
            continue
        if shrink_chunks:
            grant = try_fit(call, desired, pool, bs)
            if grant == 0:
                if claim_blocks(call.incremental_blocks(desired, bs), call):
                    grant = try_fit(call, desired, pool, bs)
        else:
            need = call.incremental_blocks(desired, bs)
            if need == 0:
                grant = desired
            elif claim_blocks(need, call) and pool.allocate(call.session_id, need):
                grant = desired
            else:
                grant = 0
        if grant > 0:
            plan.prefill_grants.append((call.session_id, grant))
            planned.append(call.session_id)
            plan.total_tokens += grant
        elif strict_order:
            break
    return plan


def select_batch(
    ready: Sequence[Call],
    pool: KvPool,
    gpu: GpuModel,
    window_size: int,
    states: Dict[str, PriorityState],
    max_decode_slots: int = K_MAX_DECODE_SLOTS,
    shrink_chunks: bool = True,
    reclaimer: Optional[Callable[[int, Call, Sequence[str]], List[Victim]]] = None,
    evict_victim: Optional[Callable[[Victim], None]] = None,
) -> TickPlan:
    """Priority-ordered tick plan: level first, then longest-ready, then id.

    This is build_plan specialized to the coordinator's ordering; the policy
    object layers promotion, quotas, and reclamation around it.
    """

    def key(call: Call) -> tuple:
        return (states[call.session_id].level, call.ready_since, call.session_id)

    return build_plan(
        ready,
        pool,
        gpu,
        order_key=key,
        window_size=window_size,
        max_decode_slots=max_decode_slots,
        shrink_chunks=shrink_chunks,
        reclaimer=reclaimer,
        evict_victim=evict_victim,
    )
