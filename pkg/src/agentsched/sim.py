"""The per-tick simulation loop wiring engine, telemetry, control plane,
and a scheduling policy into one deterministic run.

Tick order, every iteration:

1. arrivals whose time has come enter the admission queue (or the data
   plane directly for policies without admission control),
2. finished tools resume their sessions (warm when the pin survived until
   the tool returned, cold otherwise),
3. pins whose deadline passed are evicted eagerly,
4. telemetry is re-probed from ground truth,
5. on the control cadence: pressure flags refresh, a telemetry snapshot is
   exported, and the admission window packs/admits,
6. the policy builds a tick plan and the GPU executes it; round completions
   either finish the session or hand it to the tool plane.

When the plan is empty the clock skips ahead to the next event that could
change anything. A run whose ready calls can never make progress again
raises SimulationStall instead of spinning forever.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .baselines import PolicyBase
from .control import ControllerConfig, ControllerState, balance_and_admit, make_queue_entry
from .engine import (
    Call,
    ContractViolation,
    EventLog,
    GpuModel,
    K_BLOCK_SIZE,
    K_CONTEXT_LIMIT_TOKENS,
    K_TICK_DURATION_S,
    K_TOKEN_BUDGET_PER_TICK,
    KvPool,
    Phase,
    SimClock,
    ToolPlane,
    blocks_for_tokens,
    resume_cost,
    step_gpu,
    submit_round,
)
from .scheduler import TickPlan, Victim
from .telemetry import PressureConfig, Telemetry, emit_snapshot, refresh_pressure
from .workload import SessionTrace

K_DEFAULT_TOOL_WORKER_SLOTS = 8
K_DEFAULT_MAX_TICKS = 2_000_000


class SimulationStall(RuntimeError):
    """No ready call can ever make progress again; the run is wedged."""


@dataclass(frozen=True)
class EngineParams:
    total_blocks: int
    block_size: int = K_BLOCK_SIZE
    token_budget_per_tick: int = K_TOKEN_BUDGET_PER_TICK
    tick_duration_s: float = K_TICK_DURATION_S
    context_limit_tokens: int = K_CONTEXT_LIMIT_TOKENS
    tool_worker_slots: int = K_DEFAULT_TOOL_WORKER_SLOTS

    def gpu(self) -> GpuModel:
        return GpuModel(
            token_budget_per_tick=self.token_budget_per_tick,
            tick_duration_s=self.tick_duration_s,
            context_limit_tokens=self.context_limit_tokens,
        )


@dataclass
class RunResult:
    policy_name: str
    config_hash: str
    horizon_s: float
    events: List[dict]
    calls: Dict[str, Call]
    counters: Dict[str, int] = field(default_factory=dict)

    def completed_ids(self) -> List[str]:
        return sorted(s for s, c in self.calls.items() if c.phase == Phase.DONE)


def run_simulation(
    traces: Sequence[SessionTrace],
    params: EngineParams,
    policy: PolicyBase,
    controller: Optional[ControllerConfig] = None,
    pressure: Optional[PressureConfig] = None,
    enable_control_plane: bool = True,
    config_hash: str = "",
    max_ticks: int = K_DEFAULT_MAX_TICKS,
) -> RunResult:
    controller = controller or ControllerConfig()
    pressure = pressure or PressureConfig()
    gpu = params.gpu()
    for trace in traces:
        need = blocks_for_tokens(trace.total_context_tokens, params.block_size)
        if need > params.total_blocks:
            raise ContractViolation(
                f"session {trace.session_id} needs {need} KV blocks at full context, "
                f"pool holds {params.total_blocks}; the workload cannot run on this engine"
            )
    pool = KvPool(total_blocks=params.total_blocks, block_size=params.block_size)
    plane = ToolPlane(params.tool_worker_slots)
    clock = SimClock()
    log = EventLog()
    telemetry = Telemetry(total_blocks=pool.total_blocks)
    ctrl_state = ControllerState(config=controller)
    use_admission = enable_control_plane and policy.uses_admission_control

    def pool_observer(op: str, session_id: str, blocks: int, from_pinned: bool) -> None:
        if from_pinned:
            log.emit(clock.now, op, session_id, blocks=blocks, from_pinned=True)
        else:
            log.emit(clock.now, op, session_id, blocks=blocks)

    pool.observer = pool_observer

    def emit_tel(t: float, kind: str, session_id: Optional[str], **payload) -> None:
        log.emit(t, kind, session_id, **payload)
        telemetry.record(kind, payload, smoothing=pressure.ema_smoothing)

    arrivals = sorted(traces, key=lambda t: (t.arrival_time_s, t.session_id))
    arrival_idx = 0
    admission_queue = []
    active: Dict[str, Call] = {}
    emitted_first: Set[Tuple[str, int]] = set()
    counters = {
        "admitted": 0,
        "completed": 0,
        "evictions": 0,
        "preemptions": 0,
        "warm_resumes": 0,
        "cold_resumes": 0,
        "pins": 0,
        "gpu_tokens": 0,
    }
    tick = gpu.tick_duration_s
    next_control_at = 0.0

    def admit(call: Call, now: float) -> None:
        call.admit_time = now
        submit_round(call, now)
        rnd = call.current_round()
        emit_tel(
            now,
            "gpu_submit",
            call.session_id,
            round=0,
            arrival_time=call.arrival_time,
            required_prefill=call.remaining_prefill,
            new_tokens=rnd.new_prefill_tokens,
            context_tokens=call.context_tokens,
            warm=None,
            projected_blocks=call.incremental_blocks(call.remaining_prefill, pool.block_size),
        )
        active[call.session_id] = call
        policy.on_admit(call, now)
        counters["admitted"] += 1

    def evict_session(session_id: str, kind: str, reason: str, t: float) -> None:
        call = policy.calls[session_id]
        if kind == "pinned":
            blocks = pool.release_pinned(session_id)
            call.pinned = False
            call.retention_deadline = None
        else:
            blocks = pool.free(session_id)
        call.kv_tokens = 0
        if kind == "running":
            call.preemptions += 1
            counters["preemptions"] += 1
            if call.phase == Phase.DECODE:
                call.set_phase(Phase.PREFILL)
        log.emit(t, "evict", session_id, blocks=blocks, victim=kind, reason=reason)
        policy.on_evicted(session_id)
        counters["evictions"] += 1

    def plan_evictor(victim: Victim) -> None:
        reason = "reclaim" if victim.kind == "pinned" else "preempt"
        evict_session(victim.session_id, victim.kind, reason, clock.now)

    def resume_from_tool(call: Call, finish_time: float, duration_s: float, now: float) -> None:
        call.round_index += 1
        call.set_phase(Phase.WAITING_RESUME)
        warm = (
            call.pinned
            and call.retention_deadline is not None
            and call.retention_deadline >= finish_time
        )
        required = resume_cost(call, warm)
        if warm:
            pool.unpin(call.session_id)
            call.pinned = False
            call.retention_deadline = None
            policy.on_evicted(call.session_id)
            call.warm_resumes += 1
            counters["warm_resumes"] += 1
        else:
            if call.pinned:
                # The pin outlived its deadline between grid points; drop it
                # now so the cold resume recomputes from nothing.
                evict_session(call.session_id, "pinned", "pin_expired_at_return", now)
            call.cold_resumes += 1
            counters["cold_resumes"] += 1
        new_tokens = call.current_round().new_prefill_tokens
        submit_round(call, now)
        if call.remaining_prefill != required:
            raise ContractViolation(
                f"{call.session_id}: resume owes {call.remaining_prefill} prefill "
                f"tokens but the {'warm' if warm else 'cold'} cost is {required}"
            )
        emit_tel(
            now,
            "gpu_submit",
            call.session_id,
            round=call.round_index,
            required_prefill=required,
            new_tokens=new_tokens,
            context_tokens=call.context_tokens,
            warm=warm,
            projected_blocks=call.incremental_blocks(required, pool.block_size),
        )
        policy.on_resume(call, now)

    def finish_round(call: Call, now: float) -> None:
        sid = call.session_id
        held = call.held_blocks(pool.block_size)
        telemetry.note_round_blocks(
            blocks_for_tokens(call.context_tokens, pool.block_size),
            smoothing=pressure.ema_smoothing,
        )
        if call.is_last_round:
            call.completion_time = now
            call.set_phase(Phase.DONE)
            freed = pool.free(sid)
            call.kv_tokens = 0
            emit_tel(now, "gpu_end", sid, round=call.round_index, done=True, freed_blocks=freed)
            del active[sid]
            counters["completed"] += 1
            return
        rnd = call.current_round()
        decision = policy.retention_decision(call, pool, telemetry, gpu, now)
        if decision is not None:
            log.emit(
                now,
                "retention",
                sid,
                pin=decision.pin,
                benefit_s=decision.benefit_s,
                cost_s=decision.cost_s,
                deadline=decision.retention_deadline,
            )
        if decision is not None and decision.pin and held > 0:
            pool.pin(sid)
            call.pinned = True
            call.retention_deadline = decision.retention_deadline
            policy.note_pin(call, decision, held, now)
            counters["pins"] += 1
            freed = 0
        else:
            freed = pool.free(sid)
            call.kv_tokens = 0
            log.emit(now, "evict", sid, blocks=freed, victim="boundary", reason="tool_boundary")
            counters["evictions"] += 1
        emit_tel(now, "gpu_end", sid, round=call.round_index, done=False, freed_blocks=freed)
        duration = rnd.tool_duration_s if rnd.tool_duration_s is not None else 0.0
        call.set_phase(Phase.TOOL)
        started = plane.start_tool(sid, duration, now)
        emit_tel(now, "tool_num", sid, queued=plane.queued_count(), duration_s=duration)
        if started:
            emit_tel(now, "tool_start", sid, duration_s=duration, active=plane.active_count())

    ticks_run = 0
    wedged_ticks = 0
    while arrival_idx < len(arrivals) or admission_queue or active:
        if ticks_run > max_ticks:
            raise SimulationStall(f"exceeded max_ticks={max_ticks} with work outstanding")
        ticks_run += 1
        now = clock.now

        while arrival_idx < len(arrivals) and arrivals[arrival_idx].arrival_time_s <= now + 1e-9:
            trace = arrivals[arrival_idx]
            arrival_idx += 1
            call = Call(
                session_id=trace.session_id,
                rounds=list(trace.rounds),
                arrival_time=trace.arrival_time_s,
            )
            policy.register_call(call)
            if use_admission:
                admission_queue.append(
                    make_queue_entry(call, pool.total_blocks, pool.block_size, controller, now)
                )
            else:
                admit(call, now)

        finished = plane.complete_tools(now)
        for st in plane.take_promotions():
            emit_tel(
                st.start_time,
                "tool_start",
                st.session_id,
                duration_s=st.duration_s,
                active=plane.active_count(),
            )
        for ft in finished:
            emit_tel(
                ft.finish_time,
                "tool_end",
                ft.session_id,
                duration_s=ft.duration_s,
                queued_delay_s=ft.queued_delay_s,
            )
            resume_from_tool(policy.calls[ft.session_id], ft.finish_time, ft.duration_s, now)

        for sid in policy.expired_pins(now):
            evict_session(sid, "pinned", "pin_expired", now)

        telemetry.probe(pool, plane, active_sessions=len(active))

        if use_admission and now >= next_control_at - 1e-9:
            refresh_pressure(telemetry, pressure, plane.worker_slots)
            emit_snapshot(log, now, telemetry)
            admitted = balance_and_admit(
                admission_queue, ctrl_state, telemetry, plane.worker_slots, pressure, clock, log
            )
            for entry in admitted:
                admit(entry.call, now)
            next_control_at = now + controller.control_interval_s

        ready = [c for c in active.values() if c.phase in (Phase.PREFILL, Phase.DECODE)]
        ready.sort(key=lambda c: c.session_id)
        if ready:
            plan = policy.plan_tick(ready, pool, gpu, telemetry, now, plan_evictor)
        else:
            plan = TickPlan()

        if plan.total_tokens > 0:
            wedged_ticks = 0
            log.emit(
                now,
                "tick",
                None,
                tokens=plan.total_tokens,
                decodes=list(plan.decode_ids),
                prefills=[[sid, g] for sid, g in plan.prefill_grants],
                evictions=len(plan.evictions),
            )
            counters["gpu_tokens"] += plan.total_tokens
            batch = [(policy.calls[sid], 0, True) for sid in plan.decode_ids]
            batch += [(policy.calls[sid], grant, False) for sid, grant in plan.prefill_grants]
            progress = step_gpu(clock, gpu, batch)
            tick_end = clock.now
            for prog in progress:
                call = policy.calls[prog.session_id]
                policy.on_service(prog.session_id, prog.prefill_tokens + prog.decode_tokens, tick_end)
                if prog.prefill_finished and (prog.session_id, call.round_index) not in emitted_first:
                    emitted_first.add((prog.session_id, call.round_index))
                    emit_tel(
                        tick_end,
                        "gpu_1st_token",
                        prog.session_id,
                        round=call.round_index,
                        launch_delay_s=tick_end - call.round_submit_time,
                    )
                if prog.round_decode_done:
                    finish_round(call, tick_end)
            continue

        # Idle tick: jump to the next instant anything can change.
        candidates: List[float] = []
        if arrival_idx < len(arrivals):
            candidates.append(arrivals[arrival_idx].arrival_time_s)
        next_finish = plane.next_finish_time()
        if next_finish is not None:
            candidates.append(next_finish)
        if use_admission and (admission_queue or active):
            candidates.append(next_control_at)
        if ready or pool.pinned:
            # Block-starved calls wait on promotions or pin deadlines, both
            # of which resolve at tick granularity.
            candidates.append(now + tick)

        in_flight = (
            plane.active_count() > 0
            or plane.queued_count() > 0
            or arrival_idx < len(arrivals)
            or bool(admission_queue)
            or bool(pool.pinned)
        )
        if ready and not in_flight:
            wedged_ticks += 1
            stall_limit = math.ceil(len(ready) * 40.0 / tick) + 1024
            if wedged_ticks > stall_limit:
                raise SimulationStall(
                    f"{len(ready)} ready calls made no progress for {wedged_ticks} ticks; "
                    f"free_blocks={pool.free_blocks}, pinned={len(pool.pinned)}, "
                    f"ready={[c.session_id for c in ready][:8]}"
                )
        else:
            wedged_ticks = 0

        if not candidates:
            if active or admission_queue:
                raise SimulationStall(
                    f"no future event but {len(active)} active sessions remain "
                    f"({len(admission_queue)} queued for admission)"
                )
            break
        target = min(candidates)
        steps = max(1, math.ceil((target - now) / tick - 1e-9))
        clock.advance(steps * tick)

    emit_snapshot(log, clock.now, telemetry)
    pool.check_conservation()
    return RunResult(
        policy_name=policy.name,
        config_hash=config_hash,
        horizon_s=clock.now,
        events=log.records,
        calls=dict(policy.calls),
        counters=counters,
    )
