"""Deterministic simulation substrate: token-budgeted GPU, block KV pool,
slot-limited tool plane.

The GPU advances in fixed ticks. Each tick carries a token budget shared by
prefill chunks and decode steps (one token per decoding call per tick). KV
memory is allocated in fixed-size blocks; a session's blocks live in exactly
one of the pool's `allocated` or `pinned` maps. Tool execution happens on a
separate plane with a fixed number of worker slots and a FIFO overflow queue.

Nothing in this module makes policy decisions. Policies construct per-tick
plans; the engine executes them and complains when a plan violates a physical
constraint (token budget, grant bounds).
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

K_TOKEN_BUDGET_PER_TICK = 512
K_TICK_DURATION_S = 0.064
K_BLOCK_SIZE = 16
K_CONTEXT_LIMIT_TOKENS = 262_144


class ContractViolation(Exception):
    """A caller broke a documented precondition."""


# ---------------------------------------------------------------------------
# Clock and event log
# ---------------------------------------------------------------------------


class SimClock:
    """Simulated time plus a (time, seq)-ordered queue of pending events.

    The sequence number makes ordering total: two events at the same instant
    pop in schedule order, which keeps runs reproducible.
    """

    def __init__(self) -> None:
        self.now = 0.0
        self._seq = 0
        self._pending: List[Tuple[float, int, object]] = []

    def next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def schedule(self, time: float, item: object) -> None:
        if time < self.now:
            raise ContractViolation(f"cannot schedule at {time} before now={self.now}")
        heapq.heappush(self._pending, (time, self.next_seq(), item))

    def peek_time(self) -> Optional[float]:
        return self._pending[0][0] if self._pending else None

    def pop_due(self, until: float) -> List[object]:
        """Pops every pending item with time <= until, in (time, seq) order."""
        out = []
        while self._pending and self._pending[0][0] <= until:
            _, _, item = heapq.heappop(self._pending)
            out.append(item)
        return out

    def advance(self, dt: float) -> None:
        if dt < 0:
            raise ContractViolation("clock cannot run backwards")
        self.now += dt


class EventLog:
    """Append-only event record list with deterministic JSONL serialization.

    Every record carries `t`, `seq`, `kind`, `session_id` and a kind-specific
    payload. seq is strictly increasing in append order.
    """

    def __init__(self) -> None:
        self.records: List[dict] = []
        self._seq = 0

    def emit(self, t: float, kind: str, session_id: Optional[str] = None, **payload) -> dict:
        self._seq += 1
        rec = {"t": t, "seq": self._seq, "kind": kind, "session_id": session_id}
        rec.update(payload)
        self.records.append(rec)
        return rec

    def dump_jsonl(self, path: str) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# KV pool
# ---------------------------------------------------------------------------


def blocks_for_tokens(tokens: int, block_size: int) -> int:
    return math.ceil(tokens / block_size)


@dataclass
class KvPool:
    """Block-granular KV memory.

    Invariant: free_blocks + sum(allocated) + sum(pinned) == total_blocks
    after every operation, and a session appears in at most one map.
    """

    total_blocks: int
    block_size: int = K_BLOCK_SIZE
    free_blocks: int = field(init=False)
    allocated: Dict[str, int] = field(default_factory=dict)
    pinned: Dict[str, int] = field(default_factory=dict)
    # Called after every mutation as observer(op, session_id, blocks, from_pinned).
    # Lets a harness mirror pool traffic into its event log without the pool
    # knowing anything about logging.
    observer: Optional[Callable[[str, str, int, bool], None]] = field(
        default=None, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        if self.total_blocks < 1 or self.block_size < 1:
            raise ValueError("pool needs at least one block and a positive block size")
        self.free_blocks = self.total_blocks

    def _note(self, op: str, session_id: str, blocks: int, from_pinned: bool = False) -> None:
        if self.observer is not None:
            self.observer(op, session_id, blocks, from_pinned)

    # -- queries ------------------------------------------------------------

    def usage_ratio(self) -> float:
        return (self.total_blocks - self.free_blocks) / self.total_blocks

    def holder_blocks(self, session_id: str) -> int:
        return self.allocated.get(session_id, 0) + self.pinned.get(session_id, 0)

    def check_conservation(self) -> None:
        total = self.free_blocks + sum(self.allocated.values()) + sum(self.pinned.values())
        if total != self.total_blocks:
            raise ContractViolation(
                f"KV conservation broken: {total} accounted vs {self.total_blocks} total"
            )
        if self.free_blocks < 0 or any(v < 0 for v in self.allocated.values()) or any(
            v < 0 for v in self.pinned.values()
        ):
            raise ContractViolation("negative block count in KV pool")
        overlap = set(self.allocated) & set(self.pinned)
        if overlap:
            raise ContractViolation(f"sessions in both maps: {sorted(overlap)}")

    # -- mutations ----------------------------------------------------------

    def allocate(self, session_id: str, blocks: int) -> bool:
        """Takes blocks from the free list. Insufficiency is a normal False."""
        if blocks < 1:
            raise ContractViolation("allocate needs blocks >= 1")
        if session_id in self.pinned:
            raise ContractViolation(f"{session_id} is pinned; unpin before allocating")
        if blocks > self.free_blocks:
            return False
        self.free_blocks -= blocks
        self.allocated[session_id] = self.allocated.get(session_id, 0) + blocks
        self._note("alloc", session_id, blocks)
        return True

    def free(self, session_id: str, blocks: Optional[int] = None) -> int:
        """Returns blocks to the free list; all of the session's allocated
        blocks when blocks is None. Returns the count freed."""
        held = self.allocated.get(session_id, 0)
        n = held if blocks is None else blocks
        if n > held:
            raise ContractViolation(f"{session_id} holds {held} allocated blocks, not {n}")
        if n == 0:
            return 0
        self.allocated[session_id] = held - n
        if self.allocated[session_id] == 0:
            del self.allocated[session_id]
        self.free_blocks += n
        self._note("free", session_id, n)
        return n

    def pin(self, session_id: str) -> int:
        if session_id not in self.allocated:
            raise ContractViolation(f"cannot pin unknown session {session_id}")
        n = self.allocated.pop(session_id)
        self.pinned[session_id] = n
        self._note("pin", session_id, n)
        return n

    def unpin(self, session_id: str) -> int:
        if session_id not in self.pinned:
            raise ContractViolation(f"cannot unpin unknown session {session_id}")
        n = self.pinned.pop(session_id)
        self.allocated[session_id] = n
        self._note("unpin", session_id, n)
        return n

    def release_pinned(self, session_id: str) -> int:
        """Evicts a pinned session's blocks straight to the free list."""
        if session_id not in self.pinned:
            raise ContractViolation(f"cannot release unknown pinned session {session_id}")
        n = self.pinned.pop(session_id)
        self.free_blocks += n
        self._note("free", session_id, n, from_pinned=True)
        return n


# ---------------------------------------------------------------------------
# GPU model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GpuModel:
    token_budget_per_tick: int = K_TOKEN_BUDGET_PER_TICK
    tick_duration_s: float = K_TICK_DURATION_S
    context_limit_tokens: int = K_CONTEXT_LIMIT_TOKENS

    def __post_init__(self) -> None:
        if self.token_budget_per_tick < 1 or self.tick_duration_s <= 0:
            raise ValueError("GPU model needs a positive budget and tick duration")

    @property
    def prefill_rate(self) -> float:
        """Peak prefill throughput in tokens per simulated second."""
        return self.token_budget_per_tick / self.tick_duration_s


# ---------------------------------------------------------------------------
# Call state
# ---------------------------------------------------------------------------


class Phase(str, Enum):
    WAITING_ADMISSION = "waiting_admission"
    PREFILL = "prefill"
    DECODE = "decode"
    TOOL = "tool"
    WAITING_RESUME = "waiting_resume"
    DONE = "done"


@dataclass
class Call:
    """Live state of one multi-round session inside the data plane.

    context_tokens counts every token appended to the logical context so far
    (prompts, tool outputs, emitted decode tokens). kv_tokens counts how many
    of those currently have KV state resident on the GPU. The gap between the
    two is exactly the outstanding prefill work.
    """

    session_id: str
    rounds: List
    arrival_time: float
    phase: Phase = Phase.WAITING_ADMISSION
    round_index: int = 0
    context_tokens: int = 0
    kv_tokens: int = 0
    remaining_decode: int = 0
    served_tokens: int = 0
    enqueue_time: float = 0.0
    admit_time: Optional[float] = None
    round_submit_time: Optional[float] = None
    first_token_time: Optional[float] = None
    completion_time: Optional[float] = None
    ready_since: float = 0.0
    pinned: bool = False
    retention_deadline: Optional[float] = None
    warm_resumes: int = 0
    cold_resumes: int = 0
    preemptions: int = 0
    phase_history: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.enqueue_time = self.arrival_time
        self.phase_history.append(self.phase.value)

    @property
    def remaining_prefill(self) -> int:
        return self.context_tokens - self.kv_tokens

    @property
    def num_rounds(self) -> int:
        return len(self.rounds)

    @property
    def is_last_round(self) -> bool:
        return self.round_index == self.num_rounds - 1

    def current_round(self):
        return self.rounds[self.round_index]

    def set_phase(self, phase: Phase) -> None:
        self.phase = phase
        self.phase_history.append(phase.value)

    def held_blocks(self, block_size: int) -> int:
        return blocks_for_tokens(self.kv_tokens, block_size)

    def incremental_blocks(self, grant_tokens: int, block_size: int) -> int:
        after = blocks_for_tokens(self.kv_tokens + grant_tokens, block_size)
        return after - blocks_for_tokens(self.kv_tokens, block_size)


def submit_round(call: Call, now: float) -> None:
    """Appends the current round's new tokens to the logical context and puts
    the call into prefill. Used at admission (round 0) and at each resume."""
    rnd = call.current_round()
    call.context_tokens += rnd.new_prefill_tokens
    call.remaining_decode = rnd.decode_tokens
    call.round_submit_time = now
    call.ready_since = now
    call.set_phase(Phase.PREFILL)


def resume_cost(call: Call, warm: bool) -> int:
    """Prefill tokens required to resume the call's current round.

    Warm resumes pay only the round's newly appended tokens; cold resumes
    recompute the entire prefix.
    """
    if call.phase != Phase.WAITING_RESUME:
        raise ContractViolation(f"resume_cost needs waiting_resume, got {call.phase.value}")
    new = call.current_round().new_prefill_tokens
    return new if warm else call.context_tokens + new


# ---------------------------------------------------------------------------
# Tool plane
# ---------------------------------------------------------------------------


@dataclass
class FinishedTool:
    session_id: str
    start_time: float
    finish_time: float
    duration_s: float
    queued_delay_s: float


@dataclass
class StartedTool:
    session_id: str
    start_time: float
    duration_s: float


class ToolPlane:
    """Fixed worker slots plus a FIFO overflow queue.

    Finished entries are drained by complete_tools; a freed slot is handed to
    the oldest queued tool with a start time equal to the instant the slot
    became free (or the enqueue instant, whichever is later), so start times
    match an exact FIFO replay regardless of how often the caller drains.
    """

    def __init__(self, worker_slots: int) -> None:
        if worker_slots < 1:
            raise ValueError("tool plane needs at least one worker slot")
        self.worker_slots = worker_slots
        # running entries: (finish_time, seq, session_id, start_time, duration, enqueue_time)
        self._running: List[Tuple[float, int, str, float, float, float]] = []
        self._queued: List[Tuple[str, float, float]] = []
        self._seq = 0
        self._promotions: List[StartedTool] = []

    def active_count(self) -> int:
        return len(self._running)

    def queued_count(self) -> int:
        return len(self._queued)

    def next_finish_time(self) -> Optional[float]:
        return self._running[0][0] if self._running else None

    def start_tool(self, session_id: str, duration_s: float, now: float) -> bool:
        """Starts the tool if a slot is free, else queues it FIFO. Returns
        True when it started immediately."""
        if duration_s < 0:
            raise ContractViolation("tool duration must be >= 0")
        if len(self._running) < self.worker_slots:
            self._seq += 1
            heapq.heappush(
                self._running,
                (now + duration_s, self._seq, session_id, now, duration_s, now),
            )
            return True
        self._queued.append((session_id, duration_s, now))
        return False

    def complete_tools(self, now: float) -> List[FinishedTool]:
        """Releases every slot whose tool finished at or before now and
        promotes queued tools in FIFO order at the exact instants slots
        free up. Returns finished tools in finish order; promotions are
        collected for take_promotions."""
        finished: List[FinishedTool] = []
        while self._running and self._running[0][0] <= now:
            finish, _, sid, start, dur, enq = heapq.heappop(self._running)
            finished.append(
                FinishedTool(
                    session_id=sid,
                    start_time=start,
                    finish_time=finish,
                    duration_s=dur,
                    queued_delay_s=start - enq,
                )
            )
            if self._queued:
                qsid, qdur, qenq = self._queued.pop(0)
                qstart = max(finish, qenq)
                self._seq += 1
                heapq.heappush(
                    self._running, (qstart + qdur, self._seq, qsid, qstart, qdur, qenq)
                )
                self._promotions.append(
                    StartedTool(session_id=qsid, start_time=qstart, duration_s=qdur)
                )
        return finished

    def take_promotions(self) -> List[StartedTool]:
        """Queued tools that started since the last call, in start order."""
        out = self._promotions
        self._promotions = []
        return out


# ---------------------------------------------------------------------------
# GPU stepping
# ---------------------------------------------------------------------------


@dataclass
class CallProgress:
    session_id: str
    prefill_tokens: int = 0
    decode_tokens: int = 0
    prefill_finished: bool = False
    round_decode_done: bool = False


def step_gpu(
    clock: SimClock,
    gpu: GpuModel,
    batch: List[Tuple[Call, int, bool]],
) -> List[CallProgress]:
    """Executes one tick of GPU work.

    batch entries are (call, granted_prefill_tokens, decode_slot). A decode
    slot costs one budget token and emits one token for that call. The clock
    advances by exactly one tick; completion-like transitions (prefill done,
    round decode done) are reported but not acted on, because what happens
    next is a policy question.
    """
    spent = 0
    for call, grant, decode_slot in batch:
        if grant < 0:
            raise ContractViolation("negative prefill grant")
        if grant and decode_slot:
            raise ContractViolation("a call cannot prefill and decode in one tick")
        if grant > call.remaining_prefill:
            raise ContractViolation(
                f"{call.session_id}: grant {grant} exceeds remaining prefill "
                f"{call.remaining_prefill}"
            )
        spent += grant + (1 if decode_slot else 0)
    if spent > gpu.token_budget_per_tick:
        raise ContractViolation(
            f"tick plan spends {spent} tokens, budget {gpu.token_budget_per_tick}"
        )

    clock.advance(gpu.tick_duration_s)
    now = clock.now
    report: List[CallProgress] = []
    for call, grant, decode_slot in batch:
        prog = CallProgress(session_id=call.session_id)
        if grant:
            call.kv_tokens += grant
            call.served_tokens += grant
            prog.prefill_tokens = grant
            if call.remaining_prefill == 0:
                prog.prefill_finished = True
                if call.round_index == 0 and call.first_token_time is None:
                    call.first_token_time = now
                call.set_phase(Phase.DECODE)
        elif decode_slot:
            if call.phase != Phase.DECODE:
                raise ContractViolation(f"{call.session_id} got a decode slot while {call.phase.value}")
            call.kv_tokens += 1
            call.context_tokens += 1
            call.served_tokens += 1
            call.remaining_decode -= 1
            prog.decode_tokens = 1
            if call.remaining_decode == 0:
                prog.round_decode_done = True
        report.append(prog)
    return report
