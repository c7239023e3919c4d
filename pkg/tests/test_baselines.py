import pytest

from agentsched import (
    FcfsPolicy,
    GpuModel,
    KvPool,
    MarsPolicy,
    MlfqConfig,
    Phase,
    PressureConfig,
    ProgramPriorityPolicy,
    RetentionConfig,
    Telemetry,
    TtlPolicy,
    POLICY_KINDS,
    make_policy,
)

from helpers import R, make_call


GPU = GpuModel(token_budget_per_tick=512, tick_duration_s=0.064)


def fresh_pool(total=256):
    return KvPool(total_blocks=total, block_size=16)


def tel(total=256):
    return Telemetry(total_blocks=total)


def prefill(sid, arrival=0.0, remaining=100, kv=0, ready=None):
    return make_call(
        session_id=sid, arrival=arrival, phase=Phase.PREFILL,
        context_tokens=kv + remaining, kv_tokens=kv,
        ready_since=arrival if ready is None else ready,
    )


def decode(sid, arrival=0.0, kv=160, remaining=4, served=0):
    c = make_call(
        session_id=sid, arrival=arrival, phase=Phase.DECODE,
        context_tokens=kv, kv_tokens=kv, remaining_decode=remaining,
        ready_since=arrival,
    )
    c.served_tokens = served
    return c


# ---------------------------------------------------------------------------
# Factory
# ---------------------------------------------------------------------------


def test_factory_builds_every_kind():
    for kind in POLICY_KINDS:
        policy = make_policy(kind)
        assert policy.name == kind


def test_factory_rejects_unknown_kinds():
    with pytest.raises(ValueError, match="unknown policy kind"):
        make_policy("round_robin")


def test_only_the_adaptive_policy_asks_for_admission_control():
    flags = {kind: make_policy(kind).uses_admission_control for kind in POLICY_KINDS}
    assert flags == {
        "fcfs": False,
        "program_priority": False,
        "static_ttl": False,
        "dynamic_ttl": False,
        "mars": True,
    }


def test_factory_threads_params_through():
    p = make_policy("fcfs", params={"window_size": 7, "max_decode_slots": 3})
    assert p.window_size == 7 and p.max_decode_slots == 3
    t = make_policy("static_ttl", params={"ttl_seconds": 12.0})
    assert t.ttl_seconds == 12.0
    d = make_policy("dynamic_ttl", params={"multiplier": 2.5})
    assert d.multiplier == 2.5


def test_factory_passes_ablation_switches():
    m = make_policy("mars", enable_coordinator=False)
    assert isinstance(m, MarsPolicy) and not m.enable_coordinator
    m2 = make_policy("mars", enable_coscheduler=False)
    assert not m2.enable_coscheduler


def test_ttl_constructor_rejects_non_ttl_kinds():
    with pytest.raises(ValueError):
        TtlPolicy("fcfs", PressureConfig())


# ---------------------------------------------------------------------------
# FCFS
# ---------------------------------------------------------------------------


def test_fcfs_plans_in_arrival_order():
    pool = fresh_pool()
    policy = FcfsPolicy()
    calls = [prefill("b", arrival=2.0), prefill("a", arrival=1.0), prefill("c", arrival=3.0)]
    plan = policy.plan_tick(calls, pool, GPU, tel(), now=5.0, evictor=lambda v: None)
    assert [sid for sid, _ in plan.prefill_grants] == ["a", "b", "c"]


def test_fcfs_decode_slots_go_to_the_earliest_arrivals():
    pool = fresh_pool(2048)
    policy = FcfsPolicy(max_decode_slots=2)
    calls = [decode("c", arrival=3.0), decode("a", arrival=1.0), decode("b", arrival=2.0)]
    for c in calls:
        pool.allocate(c.session_id, 10)
    plan = policy.plan_tick(calls, pool, GPU, tel(), now=5.0, evictor=lambda v: None)
    assert plan.decode_ids == ["a", "b"]


def test_fcfs_never_pins():
    policy = FcfsPolicy()
    call = decode("s", kv=3200)
    assert policy.retention_decision(call, fresh_pool(), tel(), GPU, now=1.0) is None


def test_fcfs_preempts_newer_arrivals_newest_first():
    pool = fresh_pool(total=20)
    policy = FcfsPolicy()
    old = prefill("old", arrival=0.0, remaining=320)  # wants all 20 blocks
    mid = decode("mid", arrival=1.0, kv=160)
    new = decode("new", arrival=2.0, kv=160)
    pool.allocate("mid", 10)
    pool.allocate("new", 10)
    evicted = []

    def evictor(v):
        pool.free(v.session_id)
        evicted.append(v.session_id)
        for c in (mid, new):
            if c.session_id == v.session_id:
                c.kv_tokens = 0
                c.set_phase(Phase.WAITING_ADMISSION)

    plan = policy.plan_tick([old, mid, new], pool, GPU, tel(20), now=3.0, evictor=evictor)
    # mid's decode block comes out of new (the only newer arrival); old's
    # prefill then finds no further victims and stays blocked
    assert evicted == ["new"]
    assert plan.decode_ids == ["mid"]
    assert plan.prefill_grants == []

    # with the decodes waiting on tools instead, both get taken, newest first
    pool2 = fresh_pool(total=20)
    policy2 = FcfsPolicy()
    old2 = prefill("old", arrival=0.0, remaining=320)
    mid2 = decode("mid", arrival=1.0, kv=160)
    new2 = decode("new", arrival=2.0, kv=160)
    mid2.set_phase(Phase.TOOL)
    new2.set_phase(Phase.TOOL)
    pool2.allocate("mid", 10)
    pool2.allocate("new", 10)
    evicted2 = []

    def evictor2(v):
        pool2.free(v.session_id)
        evicted2.append(v.session_id)

    plan2 = policy2.plan_tick([old2, mid2, new2], pool2, GPU, tel(20), now=3.0, evictor=evictor2)
    assert evicted2 == ["new", "mid"]
    assert plan2.prefill_grants == [("old", 320)]


def test_fcfs_never_preempts_an_older_arrival():
    pool = fresh_pool(total=10)
    policy = FcfsPolicy()
    young = prefill("young", arrival=5.0, remaining=320)
    older = decode("older", arrival=0.0, kv=160)
    older.set_phase(Phase.TOOL)
    pool.allocate("older", 10)
    evicted = []
    plan = policy.plan_tick(
        [young, older], pool, GPU, tel(10), now=6.0, evictor=lambda v: evicted.append(v)
    )
    assert evicted == []
    assert plan.prefill_grants == []


# ---------------------------------------------------------------------------
# Least-service priority
# ---------------------------------------------------------------------------


def test_least_served_goes_first():
    pool = fresh_pool(2048)
    policy = ProgramPriorityPolicy(max_decode_slots=1)
    a = decode("a", served=10_000)
    b = decode("b", served=100)
    pool.allocate("a", 10)
    pool.allocate("b", 10)
    plan = policy.plan_tick([a, b], pool, GPU, tel(), now=1.0, evictor=lambda v: None)
    assert plan.decode_ids == ["b"]


def test_new_session_beats_any_served_session():
    pool = fresh_pool(2048)
    policy = ProgramPriorityPolicy()
    veteran = prefill("veteran", arrival=0.0, remaining=600)
    veteran.served_tokens = 50_000
    rookie = prefill("rookie", arrival=9.0, remaining=600)
    plan = policy.plan_tick([veteran, rookie], pool, GPU, tel(), now=10.0, evictor=lambda v: None)
    assert plan.prefill_grants[0][0] == "rookie"


def test_priority_policy_preempts_the_most_served():
    pool = fresh_pool(total=20)
    policy = ProgramPriorityPolicy()
    rookie = prefill("rookie", arrival=5.0, remaining=320)
    v1 = decode("v1", arrival=0.0, kv=160, served=9_000)
    v2 = decode("v2", arrival=0.0, kv=160, served=4_000)
    v1.set_phase(Phase.TOOL)
    v2.set_phase(Phase.TOOL)
    pool.allocate("v1", 10)
    pool.allocate("v2", 10)
    evicted = []

    def evictor(v):
        pool.free(v.session_id)
        evicted.append(v.session_id)

    plan = policy.plan_tick([rookie, v1, v2], pool, GPU, tel(20), now=6.0, evictor=evictor)
    assert evicted == ["v1", "v2"]  # most-served first
    assert plan.prefill_grants == [("rookie", 320)]


def test_priority_policy_never_pins():
    policy = ProgramPriorityPolicy()
    assert policy.retention_decision(decode("s"), fresh_pool(), tel(), GPU, 0.0) is None


def test_priority_policy_is_not_head_of_line_blocked():
    pool = fresh_pool(total=4)
    pool.allocate("hog", 4)
    policy = ProgramPriorityPolicy()
    stuck = prefill("stuck", arrival=0.0, remaining=64)
    slack = prefill("slack", arrival=1.0, remaining=1, kv=15)
    slack.served_tokens = 1  # behind `stuck` in the order
    plan = policy.plan_tick([stuck, slack], pool, GPU, tel(4), now=2.0, evictor=lambda v: None)
    # stuck gets nothing (no victims available) but slack's one token fits
    # inside its held block and still runs
    assert plan.prefill_grants == [("slack", 1)]


# ---------------------------------------------------------------------------
# TTL policies
# ---------------------------------------------------------------------------


def test_static_ttl_pins_everything_for_a_fixed_window():
    policy = TtlPolicy("static_ttl", PressureConfig())
    d = policy.retention_decision(decode("s"), fresh_pool(), tel(), GPU, now=7.0)
    assert d.pin
    assert d.retention_deadline == pytest.approx(37.0)


def test_dynamic_ttl_scales_with_the_observed_tool_ema():
    policy = TtlPolicy("dynamic_ttl", PressureConfig())
    t = tel()
    d = policy.retention_decision(decode("s"), fresh_pool(), t, GPU, now=0.0)
    assert d.retention_deadline == pytest.approx(1.5 * 5.0)  # prior before any sample
    t.record("tool_start", {})
    t.record("tool_end", {"duration_s": 20.0})
    d2 = policy.retention_decision(decode("s"), fresh_pool(), t, GPU, now=0.0)
    assert d2.retention_deadline == pytest.approx(30.0)


def test_ttl_pin_registry_and_expiry():
    policy = TtlPolicy("static_ttl", PressureConfig(), ttl_seconds=10.0)
    call = decode("s", kv=160)
    d = policy.retention_decision(call, fresh_pool(), tel(), GPU, now=0.0)
    policy.note_pin(call, d, blocks=10, now=0.0)
    assert policy.expired_pins(now=9.9) == []
    assert policy.expired_pins(now=10.1) == ["s"]
    policy.on_evicted("s")
    assert policy.expired_pins(now=11.0) == []


def test_ttl_reclaimer_takes_pins_before_running_sessions():
    pool = fresh_pool(total=20)
    policy = TtlPolicy("static_ttl", PressureConfig())
    pinned_call = decode("pinned", kv=160)
    d = policy.retention_decision(pinned_call, pool, tel(20), GPU, now=0.0)
    pool.allocate("pinned", 10)
    pool.pin("pinned")
    policy.note_pin(pinned_call, d, blocks=10, now=0.0)

    runner = decode("runner", arrival=1.0, kv=160)
    runner.set_phase(Phase.TOOL)
    pool.allocate("runner", 10)
    hungry = prefill("hungry", arrival=0.5, remaining=160)

    evicted = []

    def evictor(v):
        if v.kind == "pinned":
            pool.release_pinned(v.session_id)
            policy.on_evicted(v.session_id)
        else:
            pool.free(v.session_id)
        evicted.append(v.session_id)

    plan = policy.plan_tick([hungry, runner], pool, GPU, tel(20), now=1.0, evictor=evictor)
    assert evicted == ["pinned"]
    assert plan.prefill_grants == [("hungry", 160)]


def test_expired_pins_are_reclaimed_first():
    pool = fresh_pool(total=20)
    policy = TtlPolicy("static_ttl", PressureConfig(), ttl_seconds=5.0)
    fresh_call = decode("fresh", kv=160)
    stale_call = decode("stale", kv=160)
    for c, t0 in ((stale_call, 0.0), (fresh_call, 8.0)):
        d = policy.retention_decision(c, pool, tel(20), GPU, now=t0)
        pool.allocate(c.session_id, 10)
        pool.pin(c.session_id)
        policy.note_pin(c, d, blocks=10, now=t0)

    hungry = prefill("hungry", remaining=64)
    evicted = []

    def evictor(v):
        pool.release_pinned(v.session_id)
        policy.on_evicted(v.session_id)
        evicted.append(v.session_id)

    policy.plan_tick([hungry], pool, GPU, tel(20), now=9.0, evictor=evictor)
    assert evicted == ["stale"]  # deadline 5.0 expired; fresh (13.0) survives


# ---------------------------------------------------------------------------
# Adaptive policy
# ---------------------------------------------------------------------------


def mars(coordinator=True, coscheduler=True) -> MarsPolicy:
    return MarsPolicy(
        MlfqConfig(), RetentionConfig(), PressureConfig(),
        enable_coordinator=coordinator, enable_coscheduler=coscheduler,
    )


def test_admission_sets_the_level_from_the_first_round():
    policy = mars()
    small = make_call(session_id="small", rounds=(R(1_000, 4),))
    huge = make_call(session_id="huge", rounds=(R(200_000, 4),))
    policy.on_admit(small, 0.0)
    policy.on_admit(huge, 0.0)
    assert policy.states["small"].level == 0
    assert policy.states["huge"].level == 3


def test_service_charges_demote_only_with_the_coordinator_on():
    policy = mars()
    call = make_call(session_id="s", rounds=(R(1_000, 4),))
    policy.on_admit(call, 0.0)
    policy.on_service("s", 2_001, 1.0)
    assert policy.states["s"].level == 1

    ablated = mars(coordinator=False)
    ablated.on_admit(call, 0.0)
    ablated.on_service("s", 2_001, 1.0)
    assert ablated.states["s"].level == 0


def test_retention_is_disabled_when_the_coscheduler_is_off():
    call = decode("s", kv=200_000)
    t = tel(16_384)
    t.kv_usage_ratio = 0.10
    assert mars().retention_decision(call, KvPool(total_blocks=16_384, block_size=16), t, GPU, 0.0).pin
    assert mars(coscheduler=False).retention_decision(
        call, KvPool(total_blocks=16_384, block_size=16), t, GPU, 0.0
    ) is None


def test_plan_orders_by_level_then_ready_time():
    pool = fresh_pool(2048)
    policy = mars()
    lo = make_call(session_id="lo", rounds=(R(200_000, 4),), phase=Phase.PREFILL,
                   context_tokens=600, ready_since=0.0)
    hi = make_call(session_id="hi", rounds=(R(1_000, 4),), phase=Phase.PREFILL,
                   context_tokens=600, ready_since=5.0)
    policy.on_admit(lo, 0.0)
    policy.on_admit(hi, 5.0)
    plan = policy.plan_tick([lo, hi], pool, GPU, tel(), now=6.0, evictor=lambda v: None)
    assert plan.prefill_grants[0][0] == "hi"  # level 0 beats level 3


def test_coordinator_off_falls_back_to_arrival_order():
    pool = fresh_pool(2048)
    policy = mars(coordinator=False)
    lo = make_call(session_id="lo", arrival=0.0, rounds=(R(200_000, 4),),
                   phase=Phase.PREFILL, context_tokens=600, ready_since=0.0)
    hi = make_call(session_id="hi", arrival=5.0, rounds=(R(1_000, 4),),
                   phase=Phase.PREFILL, context_tokens=600, ready_since=5.0)
    policy.on_admit(lo, 0.0)
    policy.on_admit(hi, 5.0)
    plan = policy.plan_tick([lo, hi], pool, GPU, tel(), now=6.0, evictor=lambda v: None)
    assert plan.prefill_grants[0][0] == "lo"


def test_waiting_sessions_get_promoted_during_planning():
    pool = fresh_pool(2048)
    policy = mars()
    call = make_call(session_id="s", rounds=(R(200_000, 4),), phase=Phase.PREFILL,
                     context_tokens=600, ready_since=0.0)
    policy.on_admit(call, 0.0)
    assert policy.states["s"].level == 3
    policy.plan_tick([call], pool, GPU, tel(), now=10.0, evictor=lambda v: None)
    assert policy.states["s"].level == 2
    assert policy.states["s"].promotions == 1


def test_shrinking_follows_the_coscheduler_switch():
    policy = mars()
    pool = KvPool(total_blocks=4, block_size=16)
    call = prefill("s", remaining=100)
    policy.on_admit(make_call(session_id="s", rounds=(R(100, 4),)), 0.0)
    plan = policy.plan_tick([call], pool, GPU, tel(4), now=0.0, evictor=lambda v: None)
    assert plan.prefill_grants == [("s", 64)]  # shrunk to the 4 free blocks

    policy2 = mars(coscheduler=False)
    pool2 = KvPool(total_blocks=4, block_size=16)
    call2 = prefill("s", remaining=100)
    policy2.on_admit(make_call(session_id="s", rounds=(R(100, 4),)), 0.0)
    plan2 = policy2.plan_tick([call2], pool2, GPU, tel(4), now=0.0, evictor=lambda v: None)
    assert plan2.prefill_grants == []  # all-or-nothing refuses to shrink


def test_reclaimer_only_targets_lower_ranked_sessions():
    policy = mars()
    pool = fresh_pool(total=20)
    beneficiary = make_call(session_id="b", rounds=(R(1_000, 4),), phase=Phase.PREFILL,
                            context_tokens=320, ready_since=1.0)
    better = make_call(session_id="a", rounds=(R(1_000, 4),), phase=Phase.DECODE,
                       context_tokens=160, kv_tokens=160, remaining_decode=4, ready_since=0.0)
    policy.on_admit(beneficiary, 1.0)
    policy.on_admit(better, 0.0)
    pool.allocate("a", 10)
    pool.allocate("filler", 10)
    policy._pool = pool
    choose = policy._reclaimer([beneficiary, better], now=2.0)
    # `better` outranks the beneficiary (same level, earlier ready_since):
    # no eligible victims, so the claim is declined
    assert choose(5, beneficiary, []) == []


def test_reclaimer_takes_pins_before_lower_ranked_runners():
    policy = mars()
    pool = fresh_pool(total=30)
    beneficiary = make_call(session_id="b", rounds=(R(1_000, 4),), phase=Phase.PREFILL,
                            context_tokens=320, ready_since=0.0)
    runner = make_call(session_id="r", rounds=(R(200_000, 4),), phase=Phase.DECODE,
                       context_tokens=160, kv_tokens=160, remaining_decode=4, ready_since=1.0)
    policy.on_admit(beneficiary, 0.0)
    policy.on_admit(runner, 1.0)
    pinned_call = decode("p", kv=160)
    policy.on_admit(pinned_call, 0.0)
    pool.allocate("p", 10)
    pool.pin("p")
    pool.allocate("r", 10)
    pool.allocate("filler", 10)
    d = policy.retention_decision(pinned_call, pool, tel(30), GPU, now=0.0)
    policy.note_pin(pinned_call, d, blocks=10, now=0.0)

    policy._pool = pool
    choose = policy._reclaimer([beneficiary, runner], now=1.0)
    victims = choose(15, beneficiary, [])
    assert [(v.session_id, v.kind) for v in victims] == [("p", "pinned"), ("r", "running")]


def test_pin_registry_round_trip():
    policy = mars()
    call = decode("s", kv=32_000)
    policy.on_admit(call, 0.0)
    pool = KvPool(total_blocks=16_384, block_size=16)
    t = tel(16_384)
    t.kv_usage_ratio = 0.05
    d = policy.retention_decision(call, pool, t, GPU, now=2.0)
    assert d.pin
    assert d.retention_deadline == pytest.approx(12.0)  # 2 + 2x the 5s prior
    policy.note_pin(call, d, blocks=2_000, now=2.0)
    assert policy.pinned["s"].pinned_blocks == 2_000
    assert policy.pinned["s"].level == 0
    assert policy.expired_pins(now=12.1) == ["s"]
    policy.on_evicted("s")
    assert "s" not in policy.pinned
