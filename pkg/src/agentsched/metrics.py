"""Evaluation quantities: latency percentiles, windowed goodput, per-round
time-to-first-token, eviction-rate series, and isolated ideal times.

Everything here is pure post-processing over completion records and parsed
event logs; nothing mutates engine state.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .engine import ContractViolation, GpuModel
from .workload import SessionTrace


class LogIntegrityError(ValueError):
    """Raised when an event log lacks the pairings a metric relies on."""


@dataclass(frozen=True)
class CompletionRecord:
    session_id: str
    arrival_time: float
    completion_time: float
    latency: float
    ttft_per_round: Tuple[float, ...]
    ideal_time: float
    tau: float


@dataclass(frozen=True)
class GoodputConfig:
    slo_slack_alpha: float
    window_s: float

    def __post_init__(self) -> None:
        if self.slo_slack_alpha < 1:
            raise ContractViolation(f"slo_slack_alpha must be >= 1, got {self.slo_slack_alpha}")
        if self.window_s <= 0:
            raise ContractViolation(f"window_s must be > 0, got {self.window_s}")


@dataclass(frozen=True)
class GoodputSeries:
    window_s: float
    rates: Tuple[float, ...]
    aggregate: float


def compute_ideal_time(trace: SessionTrace, gpu: GpuModel) -> float:
    """End-to-end time of the session running alone: every prefill chunk at
    full budget, one decode token per tick, always-warm resumes, and tool
    phases back to back with no queueing."""
    ticks = 0
    tool_s = 0.0
    for r in trace.rounds:
        ticks += math.ceil(r.new_prefill_tokens / gpu.token_budget_per_tick)
        ticks += r.decode_tokens
        if r.tool_duration_s is not None:
            tool_s += r.tool_duration_s
    return ticks * gpu.tick_duration_s + tool_s


def compute_ideal_times(traces: Sequence[SessionTrace], gpu: GpuModel) -> Dict[str, float]:
    return {t.session_id: compute_ideal_time(t, gpu) for t in traces}


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: element ceil(p/100 * n) of the sorted list,
    1-based, clamped to the first element for small p."""
    if not values:
        raise ContractViolation("percentile of an empty list")
    if not (0 <= p <= 100):
        raise ContractViolation(f"percentile p must be in [0, 100], got {p}")
    ordered = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(ordered)))
    return ordered[rank - 1]


def build_completion_records(
    events: Sequence[Mapping],
    ideal_times: Mapping[str, float],
    slo_slack_alpha: float,
) -> List[CompletionRecord]:
    """Assembles per-session records from a run's event log.

    Uses round-0 gpu_submit for the arrival time, per-round
    gpu_submit/gpu_1st_token pairs for TTFT, and the done-flagged gpu_end
    for completion. Sessions without a completion event are skipped (they
    never finished inside the horizon).
    """
    arrivals: Dict[str, float] = {}
    submits: Dict[str, Dict[int, float]] = defaultdict(dict)
    firsts: Dict[str, Dict[int, float]] = defaultdict(dict)
    completions: Dict[str, float] = {}
    for ev in events:
        kind = ev["kind"]
        sid = ev.get("session_id")
        if kind == "gpu_submit":
            rnd = ev["round"]
            if rnd in submits[sid]:
                raise LogIntegrityError(f"session {sid}: duplicate gpu_submit for round {rnd}")
            submits[sid][rnd] = ev["t"]
            if rnd == 0:
                arrivals[sid] = ev["arrival_time"]
        elif kind == "gpu_1st_token":
            rnd = ev["round"]
            if rnd in firsts[sid]:
                raise LogIntegrityError(f"session {sid}: duplicate gpu_1st_token for round {rnd}")
            if rnd not in submits[sid]:
                raise LogIntegrityError(f"session {sid}: gpu_1st_token without gpu_submit for round {rnd}")
            firsts[sid][rnd] = ev["t"]
        elif kind == "gpu_end" and ev.get("done"):
            completions[sid] = ev["t"]

    records: List[CompletionRecord] = []
    for sid in sorted(completions):
        if sid not in arrivals:
            raise LogIntegrityError(f"session {sid}: completion without round-0 gpu_submit")
        if sid not in ideal_times:
            raise ContractViolation(f"session {sid}: missing ideal time")
        rounds = sorted(submits[sid])
        ttfts = []
        for rnd in rounds:
            if rnd not in firsts[sid]:
                raise LogIntegrityError(f"session {sid}: round {rnd} submitted but no first token")
            ttfts.append(firsts[sid][rnd] - submits[sid][rnd])
        arrival = arrivals[sid]
        completion = completions[sid]
        latency = completion - arrival
        ideal = ideal_times[sid]
        if latency < ideal - 1e-9:
            raise ContractViolation(
                f"session {sid}: latency {latency:.6f} s below isolated ideal {ideal:.6f} s"
            )
        records.append(
            CompletionRecord(
                session_id=sid,
                arrival_time=arrival,
                completion_time=completion,
                latency=latency,
                ttft_per_round=tuple(ttfts),
                ideal_time=ideal,
                tau=slo_slack_alpha * ideal,
            )
        )
    return records


def compute_goodput(
    records: Sequence[CompletionRecord], config: GoodputConfig, horizon_s: float
) -> GoodputSeries:
    """Eq.-style goodput: per tumbling window aligned to t=0, the number of
    completions meeting latency <= alpha * ideal, divided by the window
    width; plus the aggregate over the whole horizon."""
    if horizon_s <= 0:
        raise ContractViolation(f"horizon must be > 0, got {horizon_s}")
    for rec in records:
        if rec.ideal_time is None or math.isnan(rec.ideal_time):
            raise ContractViolation(f"session {rec.session_id}: record missing ideal time")
    dt = config.window_s
    num_windows = math.ceil(horizon_s / dt)
    counts = [0] * num_windows
    total_ok = 0
    for rec in records:
        if rec.completion_time >= num_windows * dt:
            continue
        ok = rec.latency <= config.slo_slack_alpha * rec.ideal_time
        if not ok:
            continue
        w = int(rec.completion_time / dt)
        counts[w] += 1
        total_ok += 1
    rates = tuple(c / dt for c in counts)
    return GoodputSeries(window_s=dt, rates=rates, aggregate=total_ok / horizon_s)


def ttft_per_round(events: Sequence[Mapping]) -> Dict[int, Dict[str, float]]:
    """Per-round TTFT aggregated over sessions: round index -> mean/p50/p90/p99."""
    submits: Dict[Tuple[str, int], float] = {}
    samples: Dict[int, List[float]] = defaultdict(list)
    seen_first: set = set()
    for ev in events:
        kind = ev["kind"]
        if kind == "gpu_submit":
            submits[(ev["session_id"], ev["round"])] = ev["t"]
        elif kind == "gpu_1st_token":
            key = (ev["session_id"], ev["round"])
            if key in seen_first:
                raise LogIntegrityError(f"session {key[0]}: duplicate first token for round {key[1]}")
            if key not in submits:
                raise LogIntegrityError(f"session {key[0]}: first token without submit for round {key[1]}")
            seen_first.add(key)
            samples[ev["round"]].append(ev["t"] - submits[key])
    out: Dict[int, Dict[str, float]] = {}
    for rnd in sorted(samples):
        vals = samples[rnd]
        out[rnd] = {
            "mean": sum(vals) / len(vals),
            "p50": percentile(vals, 50),
            "p90": percentile(vals, 90),
            "p99": percentile(vals, 99),
            "count": float(len(vals)),
        }
    return out


def eviction_series(events: Sequence[Mapping], bins: int) -> List[int]:
    """Evicted-block counts bucketed by normalized run progress."""
    if bins < 1:
        raise ContractViolation(f"bins must be >= 1, got {bins}")
    if not events:
        return [0] * bins
    t0 = min(ev["t"] for ev in events)
    t1 = max(ev["t"] for ev in events)
    span = t1 - t0
    series = [0] * bins
    for ev in events:
        if ev["kind"] != "evict":
            continue
        if span == 0:
            idx = 0
        else:
            idx = min(bins - 1, int((ev["t"] - t0) / span * bins))
        series[idx] += ev["blocks"]
    return series


def latency_summary(records: Sequence[CompletionRecord]) -> Dict[str, float]:
    lats = [r.latency for r in records]
    if not lats:
        return {"count": 0.0}
    return {
        "count": float(len(lats)),
        "mean": sum(lats) / len(lats),
        "p50": percentile(lats, 50),
        "p90": percentile(lats, 90),
        "p95": percentile(lats, 95),
        "p99": percentile(lats, 99),
    }


def write_summary_csv(rows: Iterable[Mapping[str, object]], path: str) -> None:
    """One row per metric value; columns are the union of row keys, with the
    common identity columns first when present."""
    rows = list(rows)
    if not rows:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("")
        return
    lead = [k for k in ("policy", "regime", "arrival_rate", "seed", "metric", "value") if any(k in r for r in rows)]
    rest = sorted({k for r in rows for k in r} - set(lead))
    fields = lead + rest
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
