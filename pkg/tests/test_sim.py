import json

import pytest

from agentsched import (
    ContractViolation,
    EngineParams,
    Phase,
    PolicyBase,
    RegimeConfig,
    SimulationStall,
    TickPlan,
    generate_workload,
    make_policy,
    run_simulation,
    run_standard_audits,
    POLICY_KINDS,
)

from helpers import R, tiny_regime, trace_of


PARAMS = EngineParams(total_blocks=4_608, tool_worker_slots=4)


def run(traces, policy_kind="fcfs", params=PARAMS, **kwargs):
    return run_simulation(traces, params, make_policy(policy_kind), **kwargs)


def assert_audits_clean(result, params=PARAMS, **kwargs):
    report = run_standard_audits(
        result.events,
        result.calls,
        total_blocks=params.total_blocks,
        token_budget=params.token_budget_per_tick,
        worker_slots=params.tool_worker_slots,
        tick_s=params.tick_duration_s,
        **kwargs,
    )
    failures = {name: v for name, v in report.items() if v}
    assert not failures, failures


# ---------------------------------------------------------------------------
# Every policy end to end on the shared small workload
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind", POLICY_KINDS)
def test_policy_completes_the_small_workload_with_clean_audits(kind, small_traces):
    result = run(small_traces, kind)
    assert result.counters["completed"] == len(small_traces)
    assert result.completed_ids() == sorted(t.session_id for t in small_traces)
    assert result.policy_name == kind
    assert_audits_clean(result, expect_fcfs_order=(kind == "fcfs"))


def test_counters_line_up_with_the_event_log(small_traces):
    result = run(small_traces, "mars")
    events = result.events
    assert result.counters["completed"] == sum(
        1 for e in events if e["kind"] == "gpu_end" and e.get("done")
    )
    assert result.counters["evictions"] == sum(1 for e in events if e["kind"] == "evict")
    assert result.counters["pins"] == sum(
        1 for e in events if e["kind"] == "retention" and e["pin"]
    )
    assert result.counters["gpu_tokens"] == sum(
        e["tokens"] for e in events if e["kind"] == "tick"
    )
    assert result.counters["admitted"] == len(small_traces)
    warm = sum(1 for e in events if e["kind"] == "gpu_submit" and e.get("warm") is True)
    cold = sum(1 for e in events if e["kind"] == "gpu_submit" and e.get("warm") is False)
    assert result.counters["warm_resumes"] == warm
    assert result.counters["cold_resumes"] == cold


def test_the_horizon_covers_every_completion(small_traces):
    result = run(small_traces, "fcfs")
    last = max(c.completion_time for c in result.calls.values())
    assert result.horizon_s >= last


# ---------------------------------------------------------------------------
# Determinism
# ---------------------------------------------------------------------------


def test_identical_runs_produce_byte_identical_logs(small_traces):
    a = run(small_traces, "mars", config_hash="x")
    b = run(small_traces, "mars", config_hash="x")
    text_a = "\n".join(json.dumps(e, sort_keys=True) for e in a.events)
    text_b = "\n".join(json.dumps(e, sort_keys=True) for e in b.events)
    assert text_a == text_b


def test_different_seeds_change_the_log(small_traces):
    other = generate_workload(tiny_regime(seed=8))
    a = run(small_traces, "fcfs")
    b = run(other, "fcfs")
    assert [e for e in a.events if e["kind"] == "tick"] != [
        e for e in b.events if e["kind"] == "tick"
    ]


# ---------------------------------------------------------------------------
# Feasibility precheck
# ---------------------------------------------------------------------------


def test_a_session_larger_than_the_pool_is_rejected_up_front():
    monster = trace_of("huge", 0.0, [R(40_000, 64)])
    small = EngineParams(total_blocks=1_024, tool_worker_slots=4)
    # 40064 total tokens -> 2504 blocks > 1024
    with pytest.raises(ContractViolation, match="cannot run on this engine"):
        run([monster], "fcfs", params=small)


def test_a_session_exactly_filling_the_pool_is_allowed():
    snug = trace_of("snug", 0.0, [R(16_320, 64)])  # 16384 tokens = 1024 blocks
    result = run([snug], "fcfs", params=EngineParams(total_blocks=1_024, tool_worker_slots=4))
    assert result.counters["completed"] == 1
    assert_audits_clean(result, params=EngineParams(total_blocks=1_024, tool_worker_slots=4))


# ---------------------------------------------------------------------------
# Warm and cold tool boundaries
# ---------------------------------------------------------------------------


def two_round_trace(tool_s: float):
    return trace_of("s", 0.0, [R(2_048, 8, tool=tool_s), R(256, 8)])


def test_static_ttl_tool_returning_before_the_deadline_resumes_warm():
    result = run([two_round_trace(29.0)], "static_ttl")
    assert result.counters["warm_resumes"] == 1
    assert result.counters["cold_resumes"] == 0
    resume = [e for e in result.events if e["kind"] == "gpu_submit" and e["round"] == 1][0]
    assert resume["warm"] is True
    assert resume["required_prefill"] == 256  # only the new tokens


def test_static_ttl_tool_returning_after_the_deadline_resumes_cold():
    result = run([two_round_trace(31.0)], "static_ttl")
    assert result.counters["warm_resumes"] == 0
    assert result.counters["cold_resumes"] == 1
    resume = [e for e in result.events if e["kind"] == "gpu_submit" and e["round"] == 1][0]
    assert resume["warm"] is False
    # the whole context comes back: first round's tokens, its decodes, new tokens
    assert resume["required_prefill"] == 2_048 + 8 + 256


def test_fcfs_always_resumes_cold(small_traces):
    result = run(small_traces, "fcfs")
    assert result.counters["warm_resumes"] == 0
    assert result.counters["pins"] == 0
    multi = sum(len(t.rounds) - 1 for t in small_traces)
    assert result.counters["cold_resumes"] == multi


def test_boundary_eviction_is_logged_when_nothing_pins():
    result = run([two_round_trace(5.0)], "fcfs")
    boundary = [e for e in result.events if e["kind"] == "evict"]
    assert len(boundary) == 1
    assert boundary[0]["victim"] == "boundary"
    assert boundary[0]["blocks"] == (2_048 + 8 + 15) // 16


def test_mars_pins_a_cheap_large_context(small_traces):
    result = run(small_traces, "mars")
    assert result.counters["pins"] > 0
    assert result.counters["warm_resumes"] > 0


# ---------------------------------------------------------------------------
# Token accounting
# ---------------------------------------------------------------------------


def test_prefill_work_equals_submitted_requirements_without_preemption():
    """On a run with no evictions of running sessions, total prefill tokens
    ticked through the GPU equal the sum of required_prefill over every
    gpu_submit (admissions and resumes)."""
    traces = [
        trace_of("a", 0.0, [R(2_000, 16, tool=2.0), R(512, 8)]),
        trace_of("b", 0.3, [R(4_000, 32, tool=1.0), R(1_024, 16)]),
        trace_of("c", 0.9, [R(1_000, 4)]),
    ]
    result = run(traces, "fcfs")
    assert result.counters["preemptions"] == 0
    submitted = sum(
        e["required_prefill"] for e in result.events if e["kind"] == "gpu_submit"
    )
    prefilled = sum(
        grant for e in result.events if e["kind"] == "tick" for _, grant in e["prefills"]
    )
    assert prefilled == submitted


def test_decode_tokens_match_the_trace():
    traces = [trace_of("a", 0.0, [R(500, 21, tool=1.0), R(100, 13)])]
    result = run(traces, "fcfs")
    decoded = sum(len(e["decodes"]) for e in result.events if e["kind"] == "tick")
    assert decoded == 21 + 13


def test_gpu_token_counter_splits_into_prefill_and_decode():
    result = run(generate_workload(tiny_regime(request_count=6)), "fcfs")
    prefilled = sum(
        g for e in result.events if e["kind"] == "tick" for _, g in e["prefills"]
    )
    decoded = sum(len(e["decodes"]) for e in result.events if e["kind"] == "tick")
    assert result.counters["gpu_tokens"] == prefilled + decoded


# ---------------------------------------------------------------------------
# Control plane wiring
# ---------------------------------------------------------------------------


def test_admission_control_runs_only_for_policies_that_want_it(small_traces):
    mars = run(small_traces, "mars")
    fcfs = run(small_traces, "fcfs")
    assert any(e["kind"] == "window_update" for e in mars.events)
    assert not any(e["kind"] == "window_update" for e in fcfs.events)
    assert any(e["kind"] == "telemetry" for e in mars.events)


def test_the_control_plane_can_be_disabled(small_traces):
    result = run(small_traces, "mars", enable_control_plane=False)
    assert not any(e["kind"] == "window_update" for e in result.events)
    assert result.counters["completed"] == len(small_traces)


def test_window_updates_respect_the_control_cadence(small_traces):
    result = run(small_traces, "mars")
    times = [e["t"] for e in result.events if e["kind"] == "window_update"]
    assert times == sorted(times)
    for a, b in zip(times, times[1:]):
        assert b - a >= 2.0 - 1e-6


def test_admissions_never_exceed_the_published_limit(small_traces):
    result = run(small_traces, "mars")
    for e in result.events:
        if e["kind"] == "window_update":
            assert len(e["admitted"]) <= max(e["slots"], 0)
            assert e["limit"] <= e["w_adm"] + 1e-9


# ---------------------------------------------------------------------------
# Stall handling
# ---------------------------------------------------------------------------


class DoNothingPolicy(PolicyBase):
    name = "do_nothing"

    def plan_tick(self, ready, pool, gpu, telemetry, now, evictor):
        return TickPlan()


def test_a_policy_that_never_schedules_raises_a_stall():
    traces = [trace_of("s", 0.0, [R(512, 4)])]
    with pytest.raises(SimulationStall):
        run_simulation(traces, PARAMS, DoNothingPolicy())


def test_max_ticks_is_a_hard_stop(small_traces):
    with pytest.raises(SimulationStall, match="max_ticks"):
        run_simulation(small_traces, PARAMS, make_policy("fcfs"), max_ticks=3)


# ---------------------------------------------------------------------------
# Event log shape
# ---------------------------------------------------------------------------


def test_event_times_and_seqs_are_monotone(small_traces):
    result = run(small_traces, "mars")
    seqs = [e["seq"] for e in result.events]
    assert seqs == sorted(seqs)
    times = [e["t"] for e in result.events]
    assert all(b >= a - 1e-9 for a, b in zip(times, times[1:]))


def test_every_session_gets_a_first_token_per_submitted_round(small_traces):
    result = run(small_traces, "static_ttl")
    submits = {(e["session_id"], e["round"]) for e in result.events if e["kind"] == "gpu_submit"}
    firsts = {(e["session_id"], e["round"]) for e in result.events if e["kind"] == "gpu_1st_token"}
    assert firsts == submits


def test_done_sessions_hold_no_blocks(small_traces):
    result = run(small_traces, "dynamic_ttl")
    for call in result.calls.values():
        assert call.phase == Phase.DONE
        assert call.kv_tokens == 0
