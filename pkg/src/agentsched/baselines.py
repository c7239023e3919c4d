"""Scheduling policies: the adaptive co-scheduling policy and four references.

Every policy runs on the identical engine substrate (same tick loop, same
block allocator, same tool plane). A policy only controls:

* the service order inside the per-tick window,
* whether prefill chunks may shrink to fit free blocks,
* what happens to a session's KV at a tool boundary (evict or pin, and the
  pin deadline),
* which victims to evict when blocks run short.

Kinds:
  fcfs              strict arrival order, no admission window, always-cold
                    tool boundaries, newest arrivals preempted first.
  program_priority  least cumulative GPU service first, retention disabled,
                    most-served sessions preempted first.
  static_ttl        fcfs ordering, every departure pinned for a fixed TTL.
  dynamic_ttl       fcfs ordering, pin deadline scales with the EMA of
                    observed tool durations.
  mars              windowed MLFQ ordering with quotas and bounded
                    promotion, chunk shrinking, benefit/cost retention,
                    pinned-before-running reclamation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

from .engine import Call, GpuModel, KvPool, Phase
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
    promote_waiting,
    reclaim_for,
)
from .telemetry import PressureConfig, Telemetry

POLICY_KINDS = ("fcfs", "program_priority", "static_ttl", "dynamic_ttl", "mars")

K_STATIC_TTL_S = 30.0
K_DYNAMIC_TTL_MULTIPLIER = 1.5

Evictor = Callable[[Victim], None]


class PolicyBase:
    """Hooks the simulation loop calls; subclasses fill in the rules."""

    name = "base"
    uses_admission_control = False

    def __init__(self) -> None:
        self.calls: Dict[str, Call] = {}

    def register_call(self, call: Call) -> None:
        self.calls[call.session_id] = call

    def on_admit(self, call: Call, now: float) -> None:
        pass

    def on_resume(self, call: Call, now: float) -> None:
        pass

    def on_service(self, session_id: str, tokens: int, now: float) -> None:
        pass

    def retention_decision(
        self, call: Call, pool: KvPool, telemetry: Telemetry, gpu: GpuModel, now: float
    ) -> Optional[RetentionDecision]:
        """None means never pin; the loop then evicts at the boundary."""
        return None

    def note_pin(self, call: Call, decision: RetentionDecision, blocks: int, now: float) -> None:
        pass

    def expired_pins(self, now: float) -> List[str]:
        return []

    def on_evicted(self, session_id: str) -> None:
        pass

    def plan_tick(
        self,
        ready: Sequence[Call],
        pool: KvPool,
        gpu: GpuModel,
        telemetry: Telemetry,
        now: float,
        evictor: Evictor,
    ) -> TickPlan:
        raise NotImplementedError


def _arrival_key(call: Call) -> tuple:
    return (call.arrival_time, call.session_id)


class FcfsPolicy(PolicyBase):
    """Arrival order everywhere; KV is dropped at every tool boundary."""

    name = "fcfs"

    def __init__(self, window_size: int = 128, max_decode_slots: int = 64) -> None:
        super().__init__()
        self.window_size = window_size
        self.max_decode_slots = max_decode_slots

    def _reclaimer(self, ready: Sequence[Call]):
        def choose(needed: int, beneficiary: Call, planned: Sequence[str]) -> List[Victim]:
            pool = self._pool
            candidates = [
                c
                for c in ready
                if c.session_id != beneficiary.session_id
                and c.session_id not in planned
                and c.arrival_time > beneficiary.arrival_time
                and c.held_blocks(pool.block_size) > 0
            ]
            candidates.sort(key=lambda c: (-c.arrival_time, c.session_id))
            chosen: List[Victim] = []
            freed = 0
            for c in candidates:
                blocks = c.held_blocks(pool.block_size)
                chosen.append(Victim(c.session_id, "running", blocks))
                freed += blocks
                if pool.free_blocks + freed >= needed:
                    return chosen
            return []

        return choose

    def plan_tick(self, ready, pool, gpu, telemetry, now, evictor):
        self._pool = pool
        return build_plan(
            ready,
            pool,
            gpu,
            order_key=_arrival_key,
            window_size=self.window_size,
            max_decode_slots=self.max_decode_slots,
            shrink_chunks=False,
            reclaimer=self._reclaimer(ready),
            evict_victim=evictor,
            strict_order=True,
        )


class ProgramPriorityPolicy(PolicyBase):
    """Least cumulative service first; resource-agnostic otherwise."""

    name = "program_priority"

    def __init__(self, window_size: int = 128, max_decode_slots: int = 64) -> None:
        super().__init__()
        self.window_size = window_size
        self.max_decode_slots = max_decode_slots

    @staticmethod
    def _key(call: Call) -> tuple:
        return (call.served_tokens, call.arrival_time, call.session_id)

    def _reclaimer(self, ready: Sequence[Call]):
        def choose(needed: int, beneficiary: Call, planned: Sequence[str]) -> List[Victim]:
            pool = self._pool
            candidates = [
                c
                for c in ready
                if c.session_id != beneficiary.session_id
                and c.session_id not in planned
                and c.served_tokens > beneficiary.served_tokens
                and c.held_blocks(pool.block_size) > 0
            ]
            candidates.sort(key=lambda c: (-c.served_tokens, c.session_id))
            chosen: List[Victim] = []
            freed = 0
            for c in candidates:
                blocks = c.held_blocks(pool.block_size)
                chosen.append(Victim(c.session_id, "running", blocks))
                freed += blocks
                if pool.free_blocks + freed >= needed:
                    return chosen
            return []

        return choose

    def plan_tick(self, ready, pool, gpu, telemetry, now, evictor):
        self._pool = pool
        return build_plan(
            ready,
            pool,
            gpu,
            order_key=self._key,
            window_size=self.window_size,
            max_decode_slots=self.max_decode_slots,
            shrink_chunks=False,
            reclaimer=self._reclaimer(ready),
            evict_victim=evictor,
        )


class TtlPolicy(PolicyBase):
    """fcfs ordering plus unconditional pinning with a deadline rule.

    static: deadline = now + ttl_seconds.
    dynamic: deadline = now + multiplier * EMA tool duration (the configured
    prior stands in before the first observed tool completes).
    """

    def __init__(
        self,
        kind: str,
        pressure: PressureConfig,
        ttl_seconds: float = K_STATIC_TTL_S,
        multiplier: float = K_DYNAMIC_TTL_MULTIPLIER,
        window_size: int = 128,
        max_decode_slots: int = 64,
    ) -> None:
        super().__init__()
        if kind not in ("static_ttl", "dynamic_ttl"):
            raise ValueError(f"not a ttl policy kind: {kind}")
        self.name = kind
        self.pressure = pressure
        self.ttl_seconds = ttl_seconds
        self.multiplier = multiplier
        self.window_size = window_size
        self.max_decode_slots = max_decode_slots
        self.pinned: Dict[str, PinnedSession] = {}

    def retention_decision(self, call, pool, telemetry, gpu, now):
        if self.name == "static_ttl":
            deadline = now + self.ttl_seconds
        else:
            deadline = now + self.multiplier * telemetry.effective_tool_estimate(self.pressure)
        return RetentionDecision(pin=True, benefit_s=0.0, cost_s=0.0, retention_deadline=deadline)

    def note_pin(self, call, decision, blocks, now):
        self.pinned[call.session_id] = PinnedSession(
            session_id=call.session_id,
            pinned_blocks=blocks,
            pinned_at=now,
            predicted_return=decision.retention_deadline,
            retention_deadline=decision.retention_deadline,
            level=0,
        )

    def expired_pins(self, now: float) -> List[str]:
        return sorted(
            sid for sid, ps in self.pinned.items() if ps.retention_deadline < now
        )

    def on_evicted(self, session_id: str) -> None:
        self.pinned.pop(session_id, None)

    def _reclaimer(self, ready: Sequence[Call], now: float):
        def choose(needed: int, beneficiary: Call, planned: Sequence[str]) -> List[Victim]:
            pool = self._pool
            chosen: List[Victim] = []
            freed = 0
            pinned = sorted(
                self.pinned.values(),
                key=lambda ps: (
                    0 if ps.retention_deadline < now else 1,
                    ps.retention_deadline,
                    -ps.pinned_blocks,
                    ps.session_id,
                ),
            )
            for ps in pinned:
                chosen.append(Victim(ps.session_id, "pinned", ps.pinned_blocks))
                freed += ps.pinned_blocks
                if pool.free_blocks + freed >= needed:
                    return chosen
            running = [
                c
                for c in ready
                if c.session_id != beneficiary.session_id
                and c.session_id not in planned
                and c.arrival_time > beneficiary.arrival_time
                and c.held_blocks(pool.block_size) > 0
            ]
            running.sort(key=lambda c: (-c.arrival_time, c.session_id))
            for c in running:
                blocks = c.held_blocks(pool.block_size)
                chosen.append(Victim(c.session_id, "running", blocks))
                freed += blocks
                if pool.free_blocks + freed >= needed:
                    return chosen
            return []

        return choose

    def plan_tick(self, ready, pool, gpu, telemetry, now, evictor):
        self._pool = pool
        return build_plan(
            ready,
            pool,
            gpu,
            order_key=_arrival_key,
            window_size=self.window_size,
            max_decode_slots=self.max_decode_slots,
            shrink_chunks=False,
            reclaimer=self._reclaimer(ready, now),
            evict_victim=evictor,
            strict_order=True,
        )


class MarsPolicy(PolicyBase):
    """Windowed MLFQ coordinator plus opportunistic co-scheduler.

    Ablation switches:
      enable_coordinator=False  drops to arrival-order service and
                                resource-only preemption (no levels,
                                no quotas, no promotion).
      enable_coscheduler=False  disables chunk shrinking and retention
                                (every tool boundary evicts).
    The admission window lives in the control plane and is switched off
    at the simulation level.
    """

    name = "mars"
    uses_admission_control = True

    def __init__(
        self,
        mlfq: MlfqConfig,
        retention: RetentionConfig,
        pressure: PressureConfig,
        enable_coordinator: bool = True,
        enable_coscheduler: bool = True,
    ) -> None:
        super().__init__()
        self.mlfq = mlfq
        self.retention = retention
        self.pressure = pressure
        self.enable_coordinator = enable_coordinator
        self.enable_coscheduler = enable_coscheduler
        self.states: Dict[str, PriorityState] = {}
        self.pinned: Dict[str, PinnedSession] = {}

    # -- priority -----------------------------------------------------------

    def on_admit(self, call: Call, now: float) -> None:
        level = initial_level(call.rounds[0].new_prefill_tokens, self.mlfq)
        self.states[call.session_id] = PriorityState(level=level, base_level=level, wait_since=now)

    def on_resume(self, call: Call, now: float) -> None:
        st = self.states.get(call.session_id)
        if st is not None:
            st.wait_since = now

    def on_service(self, session_id: str, tokens: int, now: float) -> None:
        st = self.states.get(session_id)
        if st is None or not self.enable_coordinator:
            return
        charge_service(st, tokens, self.mlfq)
        st.wait_since = now

    def level_of(self, call: Call) -> int:
        if not self.enable_coordinator:
            return 0
        return self.states[call.session_id].level

    def _order_key(self, call: Call) -> tuple:
        if not self.enable_coordinator:
            return (call.arrival_time, call.session_id)
        return (self.states[call.session_id].level, call.ready_since, call.session_id)

    # -- retention ------------------------------------------------------------

    def retention_decision(self, call, pool, telemetry, gpu, now):
        if not self.enable_coscheduler:
            return None
        return decide_retention(call, telemetry, pool, gpu, self.retention, self.pressure, now)

    def note_pin(self, call, decision, blocks, now):
        self.pinned[call.session_id] = PinnedSession(
            session_id=call.session_id,
            pinned_blocks=blocks,
            pinned_at=now,
            predicted_return=now + self.pressure.initial_tool_estimate_s,
            retention_deadline=decision.retention_deadline,
            level=self.level_of(call),
        )

    def expired_pins(self, now: float) -> List[str]:
        return sorted(
            sid for sid, ps in self.pinned.items() if ps.retention_deadline < now
        )

    def on_evicted(self, session_id: str) -> None:
        self.pinned.pop(session_id, None)

    # -- planning --------------------------------------------------------------

    def _reclaimer(self, ready: Sequence[Call], now: float):
        def choose(needed: int, beneficiary: Call, planned: Sequence[str]) -> List[Victim]:
            pool = self._pool
            if self.enable_coordinator:
                b_rank = (
                    self.level_of(beneficiary),
                    beneficiary.ready_since,
                    beneficiary.session_id,
                )
                running = [
                    c
                    for c in ready
                    if c.session_id != beneficiary.session_id
                    and c.session_id not in planned
                    and c.held_blocks(pool.block_size) > 0
                    and (self.level_of(c), c.ready_since, c.session_id) > b_rank
                ]
                return reclaim_for(
                    needed, pool, self.pinned, running, self.level_of, now
                )
            running = [
                c
                for c in ready
                if c.session_id != beneficiary.session_id
                and c.session_id not in planned
                and c.arrival_time > beneficiary.arrival_time
                and c.held_blocks(pool.block_size) > 0
            ]
            return reclaim_for(
                needed, pool, self.pinned, running, lambda c: 0, now
            )

        return choose

    def plan_tick(self, ready, pool, gpu, telemetry, now, evictor):
        self._pool = pool
        if self.enable_coordinator:
            ready_states = [self.states[c.session_id] for c in ready]
            promote_waiting(ready_states, now, self.mlfq)
        return build_plan(
            ready,
            pool,
            gpu,
            order_key=self._order_key,
            window_size=self.mlfq.window_size,
            max_decode_slots=self.mlfq.max_decode_slots,
            shrink_chunks=self.enable_coscheduler,
            reclaimer=self._reclaimer(ready, now),
            evict_victim=evictor,
        )


def make_policy(
    kind: str,
    mlfq: Optional[MlfqConfig] = None,
    retention: Optional[RetentionConfig] = None,
    pressure: Optional[PressureConfig] = None,
    params: Optional[dict] = None,
    enable_coordinator: bool = True,
    enable_coscheduler: bool = True,
) -> PolicyBase:
    """Builds a policy object from its configuration kind."""
    mlfq = mlfq or MlfqConfig()
    retention = retention or RetentionConfig()
    pressure = pressure or PressureConfig()
    params = dict(params or {})
    window = params.pop("window_size", mlfq.window_size)
    slots = params.pop("max_decode_slots", mlfq.max_decode_slots)
    if kind == "fcfs":
        return FcfsPolicy(window_size=window, max_decode_slots=slots)
    if kind == "program_priority":
        return ProgramPriorityPolicy(window_size=window, max_decode_slots=slots)
    if kind in ("static_ttl", "dynamic_ttl"):
        return TtlPolicy(
            kind,
            pressure,
            ttl_seconds=params.pop("ttl_seconds", K_STATIC_TTL_S),
            multiplier=params.pop("multiplier", K_DYNAMIC_TTL_MULTIPLIER),
            window_size=window,
            max_decode_slots=slots,
        )
    if kind == "mars":
        return MarsPolicy(
            mlfq,
            retention,
            pressure,
            enable_coordinator=enable_coordinator,
            enable_coscheduler=enable_coscheduler,
        )
    raise ValueError(f"unknown policy kind {kind!r}; expected one of {POLICY_KINDS}")
