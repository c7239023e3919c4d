"""Post-run log auditors.

Each auditor replays one invariant over an event log (or the finished call
states) with its own independent bookkeeping and returns a list of violation
strings, empty when the invariant held. The run driver fails a run when any
auditor returns a non-empty list.
"""

from __future__ import annotations

import heapq
from collections import defaultdict
from typing import Dict, List, Mapping, Optional, Sequence

from .engine import Call, Phase

LEGAL_TRANSITIONS = {
    ("waiting_admission", "prefill"),
    ("prefill", "decode"),
    ("decode", "tool"),
    ("decode", "done"),
    ("tool", "waiting_resume"),
    ("waiting_resume", "prefill"),
}
PREEMPTION_TRANSITION = ("decode", "prefill")


def audit_kv_conservation(events: Sequence[Mapping], total_blocks: int, drained: bool = True) -> List[str]:
    """Replays alloc/free/pin/unpin records against an independent ledger."""
    violations: List[str] = []
    free = total_blocks
    allocated: Dict[str, int] = defaultdict(int)
    pinned: Dict[str, int] = defaultdict(int)
    for ev in events:
        kind = ev["kind"]
        if kind not in ("alloc", "free", "pin", "unpin"):
            continue
        sid = ev["session_id"]
        blocks = ev["blocks"]
        seq = ev["seq"]
        if kind == "alloc":
            free -= blocks
            allocated[sid] += blocks
            if free < 0:
                violations.append(f"seq {seq}: alloc of {blocks} blocks overdraws the pool")
        elif kind == "free":
            if ev.get("from_pinned"):
                if pinned[sid] != blocks:
                    violations.append(
                        f"seq {seq}: release of {blocks} pinned blocks but {sid} pins {pinned[sid]}"
                    )
                pinned[sid] = 0
            else:
                if allocated[sid] < blocks:
                    violations.append(
                        f"seq {seq}: free of {blocks} blocks but {sid} holds {allocated[sid]}"
                    )
                allocated[sid] -= blocks
            free += blocks
        elif kind == "pin":
            if allocated[sid] != blocks:
                violations.append(
                    f"seq {seq}: pin of {blocks} blocks but {sid} holds {allocated[sid]} allocated"
                )
            allocated[sid] = 0
            pinned[sid] += blocks
        elif kind == "unpin":
            if pinned[sid] != blocks:
                violations.append(
                    f"seq {seq}: unpin of {blocks} blocks but {sid} pins {pinned[sid]}"
                )
            pinned[sid] = 0
            allocated[sid] += blocks
        balance = free + sum(allocated.values()) + sum(pinned.values())
        if balance != total_blocks:
            violations.append(f"seq {seq}: ledger sums to {balance}, pool total is {total_blocks}")
    if drained and not violations and free != total_blocks:
        violations.append(f"end of run: {total_blocks - free} blocks never returned to the pool")
    return violations


def audit_budget_compliance(events: Sequence[Mapping], token_budget: int) -> List[str]:
    """Every tick spends at most the budget, and its token total matches the
    decode count plus the prefill grants it reports."""
    violations: List[str] = []
    for ev in events:
        if ev["kind"] != "tick":
            continue
        seq = ev["seq"]
        tokens = ev["tokens"]
        recount = len(ev["decodes"]) + sum(g for _, g in ev["prefills"])
        if tokens > token_budget:
            violations.append(f"seq {seq}: tick spends {tokens} tokens, budget {token_budget}")
        if tokens != recount:
            violations.append(f"seq {seq}: tick reports {tokens} tokens but entries sum to {recount}")
    return violations


def audit_warm_cold_accounting(events: Sequence[Mapping]) -> List[str]:
    """Every resume pays the right prefill: the round's new tokens when the
    session's pin survived (witnessed by the unpin immediately before the
    submit), the full context otherwise."""
    violations: List[str] = []
    unpin_seen: set = set()
    for ev in events:
        kind = ev["kind"]
        sid = ev.get("session_id")
        if kind == "unpin":
            unpin_seen.add(sid)
        elif kind == "gpu_submit":
            rnd = ev["round"]
            if rnd == 0:
                continue
            seq = ev["seq"]
            warm_logged = ev["warm"]
            warm_actual = sid in unpin_seen
            unpin_seen.discard(sid)
            if warm_logged != warm_actual:
                violations.append(
                    f"seq {seq}: {sid} round {rnd} logged warm={warm_logged} "
                    f"but pool traffic says warm={warm_actual}"
                )
            expected = ev["new_tokens"] if warm_actual else ev["context_tokens"]
            if ev["required_prefill"] != expected:
                violations.append(
                    f"seq {seq}: {sid} round {rnd} ({'warm' if warm_actual else 'cold'}) "
                    f"owes {expected} prefill tokens, logged {ev['required_prefill']}"
                )
    return violations


def audit_phase_legality(calls: Mapping[str, Call]) -> List[str]:
    """Phase histories follow the round state machine; a decode-to-prefill
    jump is legal only when backed by that call's recorded preemptions."""
    violations: List[str] = []
    for sid in sorted(calls):
        call = calls[sid]
        history = call.phase_history
        preempt_jumps = 0
        for a, b in zip(history, history[1:]):
            if (a, b) == PREEMPTION_TRANSITION:
                preempt_jumps += 1
                continue
            if (a, b) not in LEGAL_TRANSITIONS:
                violations.append(f"{sid}: illegal phase transition {a} -> {b}")
        if preempt_jumps > call.preemptions:
            violations.append(
                f"{sid}: {preempt_jumps} decode->prefill jumps but only "
                f"{call.preemptions} recorded preemptions"
            )
    return violations


def audit_admission_bounds(events: Sequence[Mapping]) -> List[str]:
    """No window update admits more sessions than its published slot count,
    and never admits when slots are non-positive."""
    violations: List[str] = []
    for ev in events:
        if ev["kind"] != "window_update":
            continue
        seq = ev["seq"]
        slots = ev["slots"]
        admitted = len(ev["admitted"])
        if slots <= 0 and admitted > 0:
            violations.append(f"seq {seq}: admitted {admitted} sessions with slots={slots}")
        elif admitted > max(0, slots):
            violations.append(f"seq {seq}: admitted {admitted} sessions, only {slots} slots")
    return violations


def audit_tool_fifo(events: Sequence[Mapping], worker_slots: int) -> List[str]:
    """Tool starts must match an exact FIFO replay of the enqueue order over
    the configured worker slots."""
    violations: List[str] = []
    jobs = []  # (enqueue_t, session_id, duration) in enqueue order
    starts: Dict[str, List[float]] = defaultdict(list)
    ends: Dict[str, List[Mapping]] = defaultdict(list)
    for ev in events:
        if ev["kind"] == "tool_num":
            jobs.append((ev["t"], ev["session_id"], ev["duration_s"]))
        elif ev["kind"] == "tool_start":
            starts[ev["session_id"]].append(ev["t"])
        elif ev["kind"] == "tool_end":
            ends[ev["session_id"]].append(ev)

    slot_free = [0.0] * worker_slots
    heapq.heapify(slot_free)
    for enq_t, sid, duration in jobs:
        slot_at = heapq.heappop(slot_free)
        expected_start = max(enq_t, slot_at)
        heapq.heappush(slot_free, expected_start + duration)
        if not starts[sid]:
            violations.append(f"{sid}: tool enqueued at {enq_t:.6f} never started")
            continue
        actual = starts[sid].pop(0)
        if abs(actual - expected_start) > 1e-9:
            violations.append(
                f"{sid}: tool started at {actual:.6f}, FIFO replay expects {expected_start:.6f}"
            )
    for sid, leftover in sorted(starts.items()):
        if leftover:
            violations.append(f"{sid}: {len(leftover)} tool starts without matching enqueue")
    return violations


def audit_pinned_residency(
    events: Sequence[Mapping], max_residency_s: float, tick_s: float
) -> List[str]:
    """No pin stays resident longer than its ceiling (plus one tick of grid
    quantization slack). Used for the fixed-TTL policy."""
    violations: List[str] = []
    pinned_at: Dict[str, float] = {}
    for ev in events:
        kind = ev["kind"]
        sid = ev.get("session_id")
        if kind == "pin":
            pinned_at[sid] = ev["t"]
        elif kind == "unpin" or (kind == "free" and ev.get("from_pinned")):
            if sid in pinned_at:
                held = ev["t"] - pinned_at.pop(sid)
                if held > max_residency_s + tick_s + 1e-6:
                    violations.append(
                        f"seq {ev['seq']}: {sid} stayed pinned {held:.3f} s, "
                        f"ceiling {max_residency_s:.3f} s"
                    )
    for sid in sorted(pinned_at):
        violations.append(f"{sid}: still pinned at end of log")
    return violations


def audit_fcfs_order(events: Sequence[Mapping]) -> List[str]:
    """The order in which sessions first receive GPU service follows
    arrival order (head-of-line semantics for the arrival-ordered policies)."""
    violations: List[str] = []
    arrival: Dict[str, float] = {}
    first_service: List[str] = []
    seen: set = set()
    for ev in events:
        if ev["kind"] == "gpu_submit" and ev["round"] == 0:
            arrival[ev["session_id"]] = ev["arrival_time"]
        elif ev["kind"] == "tick":
            for sid, _ in ev["prefills"]:
                if sid not in seen:
                    seen.add(sid)
                    first_service.append(sid)
            for sid in ev["decodes"]:
                if sid not in seen:
                    seen.add(sid)
                    first_service.append(sid)
    last = None
    for sid in first_service:
        if last is not None and arrival[sid] < arrival[last] - 1e-9:
            violations.append(
                f"{sid} (arrived {arrival[sid]:.3f}) was served before "
                f"{last} (arrived {arrival[last]:.3f})"
            )
        last = sid
    return violations


def run_standard_audits(
    events: Sequence[Mapping],
    calls: Mapping[str, Call],
    total_blocks: int,
    token_budget: int,
    worker_slots: int,
    drained: bool = True,
    pinned_residency_ceiling_s: Optional[float] = None,
    tick_s: float = 0.064,
    expect_fcfs_order: bool = False,
) -> Dict[str, List[str]]:
    """Runs every applicable auditor; the result maps audit name to its
    violation list."""
    out = {
        "kv_conservation": audit_kv_conservation(events, total_blocks, drained=drained),
        "budget_compliance": audit_budget_compliance(events, token_budget),
        "warm_cold_accounting": audit_warm_cold_accounting(events),
        "phase_legality": audit_phase_legality(calls),
        "admission_bounds": audit_admission_bounds(events),
        "tool_fifo": audit_tool_fifo(events, worker_slots),
    }
    if pinned_residency_ceiling_s is not None:
        out["pinned_residency"] = audit_pinned_residency(
            events, pinned_residency_ceiling_s, tick_s
        )
    if expect_fcfs_order:
        out["fcfs_order"] = audit_fcfs_order(events)
    return out
