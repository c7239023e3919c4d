"""Shared builders for the test suite. Kept deliberately dumb."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

from agentsched import Call, Phase, RegimeConfig, RoundSpec, SessionTrace


def R(new_prefill: int, decode: int, tool: Optional[float] = None) -> RoundSpec:
    return RoundSpec(new_prefill_tokens=new_prefill, decode_tokens=decode, tool_duration_s=tool)


def trace_of(session_id: str, arrival: float, rounds: Sequence[RoundSpec]) -> SessionTrace:
    return SessionTrace(session_id=session_id, arrival_time_s=arrival, rounds=tuple(rounds))


def make_call(
    session_id: str = "s0",
    rounds: Sequence[RoundSpec] = (R(512, 4),),
    arrival: float = 0.0,
    phase: Phase = Phase.WAITING_ADMISSION,
    context_tokens: int = 0,
    kv_tokens: int = 0,
    remaining_decode: int = 0,
    ready_since: float = 0.0,
) -> Call:
    call = Call(session_id=session_id, rounds=list(rounds), arrival_time=arrival)
    call.phase = phase
    call.phase_history[-1] = phase.value
    call.context_tokens = context_tokens
    call.kv_tokens = kv_tokens
    call.remaining_decode = remaining_decode
    call.ready_since = ready_since
    return call


def tiny_regime(
    request_count: int = 12,
    arrival_rate: float = 0.5,
    seed: int = 7,
    mean: float = 12_000.0,
    volume_range: Tuple[float, float] = (1_000.0, 64_000.0),
    rounds_range: Tuple[int, int] = (1, 4),
    tool: Optional[dict] = None,
) -> RegimeConfig:
    """Small mixed workload that runs in well under a second per policy."""
    if tool is None:
        tool = {"family": "lognormal", "median_s": 3.0, "sigma": 0.8}
    return RegimeConfig(
        mean_prompt_volume=mean,
        prompt_volume_range=volume_range,
        rounds_range=rounds_range,
        tool_duration_distribution=tool,
        arrival_rate=arrival_rate,
        request_count=request_count,
        seed=seed,
    )
