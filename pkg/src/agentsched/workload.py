"""Multi-turn session trace generation, validation, and JSONL round-trip.

A session trace is the full script of one agent: per round, how many new
tokens arrive for prefill (prompt for round 0, tool output plus continuation
afterward), how many tokens the model decodes, and how long the tool phase
after the round runs. Traces carry no text, only lengths and durations.

Volumes are drawn log-uniformly over a configured range with a power tilt
on the uniform deviate so the analytic mean lands exactly on the configured
target; plain rescaling would clip against the range bounds and bias the
mean for the heavier regimes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .engine import K_CONTEXT_LIMIT_TOKENS

K_ROUND0_VOLUME_FRACTION = 0.60
K_DEFAULT_DECODE_RANGE = (64, 512)
K_DEFAULT_TOOL_DISTRIBUTION = {"family": "lognormal", "median_s": 5.0, "sigma": 1.0}


class WorkloadConfigError(ValueError):
    """Raised when a RegimeConfig field fails validation."""


class TraceFormatError(ValueError):
    """Raised when a trace file cannot be parsed or violates an invariant."""


@dataclass(frozen=True)
class RoundSpec:
    new_prefill_tokens: int
    decode_tokens: int
    tool_duration_s: Optional[float] = None


@dataclass(frozen=True)
class SessionTrace:
    session_id: str
    arrival_time_s: float
    rounds: Tuple[RoundSpec, ...]

    @property
    def total_prefill_tokens(self) -> int:
        return sum(r.new_prefill_tokens for r in self.rounds)

    @property
    def total_context_tokens(self) -> int:
        return sum(r.new_prefill_tokens + r.decode_tokens for r in self.rounds)


@dataclass(frozen=True)
class RegimeConfig:
    """Shape of one input-length regime.

    mean_prompt_volume is the target mean of the total prefill volume per
    session; it must lie strictly inside prompt_volume_range. The tool
    duration distribution is a dict: {"family": "lognormal", "median_s": m,
    "sigma": s}, {"family": "constant", "value_s": v}, or None for
    tool-free traces.
    """

    mean_prompt_volume: float
    prompt_volume_range: Tuple[float, float]
    rounds_range: Tuple[int, int]
    arrival_rate: float
    request_count: int
    seed: int
    tool_duration_distribution: Optional[Dict[str, float]] = field(
        default_factory=lambda: dict(K_DEFAULT_TOOL_DISTRIBUTION)
    )
    decode_tokens_range: Tuple[int, int] = K_DEFAULT_DECODE_RANGE
    round0_volume_fraction: float = K_ROUND0_VOLUME_FRACTION

    def validate(self) -> None:
        lo, hi = self.prompt_volume_range
        if not (0 < lo <= hi):
            raise WorkloadConfigError(f"prompt_volume_range must be positive and ordered, got {self.prompt_volume_range}")
        if lo < hi and not (lo < self.mean_prompt_volume < hi):
            raise WorkloadConfigError(
                f"mean_prompt_volume {self.mean_prompt_volume} outside open range ({lo}, {hi})"
            )
        if lo == hi and self.mean_prompt_volume != lo:
            raise WorkloadConfigError("mean_prompt_volume must equal the degenerate prompt_volume_range")
        rmin, rmax = self.rounds_range
        if not (1 <= rmin <= rmax):
            raise WorkloadConfigError(f"rounds_range must satisfy 1 <= min <= max, got {self.rounds_range}")
        if self.arrival_rate <= 0:
            raise WorkloadConfigError(f"arrival_rate must be > 0, got {self.arrival_rate}")
        if self.request_count < 1:
            raise WorkloadConfigError(f"request_count must be >= 1, got {self.request_count}")
        dmin, dmax = self.decode_tokens_range
        if not (1 <= dmin <= dmax):
            raise WorkloadConfigError(f"decode_tokens_range must satisfy 1 <= min <= max, got {self.decode_tokens_range}")
        if not (0.0 < self.round0_volume_fraction <= 1.0):
            raise WorkloadConfigError(f"round0_volume_fraction must be in (0, 1], got {self.round0_volume_fraction}")
        dist = self.tool_duration_distribution
        if dist is not None:
            family = dist.get("family")
            if family == "lognormal":
                if dist.get("median_s", 0) <= 0 or dist.get("sigma", 0) <= 0:
                    raise WorkloadConfigError(f"lognormal tool_duration_distribution needs median_s > 0 and sigma > 0, got {dist}")
            elif family == "constant":
                if dist.get("value_s", -1) < 0:
                    raise WorkloadConfigError(f"constant tool_duration_distribution needs value_s >= 0, got {dist}")
            else:
                raise WorkloadConfigError(f"tool_duration_distribution family must be lognormal or constant, got {family!r}")


REGIME_PRESETS: Dict[str, Dict[str, object]] = {
    "light": {"mean_prompt_volume": 125_000.0, "prompt_volume_range": (16_000.0, 258_000.0)},
    "medium": {"mean_prompt_volume": 167_000.0, "prompt_volume_range": (16_000.0, 258_000.0)},
    "heavy": {"mean_prompt_volume": 220_000.0, "prompt_volume_range": (32_000.0, 258_000.0)},
    "extreme": {"mean_prompt_volume": 250_000.0, "prompt_volume_range": (64_000.0, 258_000.0)},
}


def regime_preset(
    name: str,
    arrival_rate: float = 0.25,
    request_count: int = 200,
    seed: int = 0,
    rounds_range: Tuple[int, int] = (2, 6),
) -> RegimeConfig:
    """Named input-length regimes spanning light to near context-limit."""
    if name not in REGIME_PRESETS:
        raise WorkloadConfigError(f"unknown regime {name!r}; expected one of {sorted(REGIME_PRESETS)}")
    base = REGIME_PRESETS[name]
    return RegimeConfig(
        mean_prompt_volume=base["mean_prompt_volume"],  # type: ignore[arg-type]
        prompt_volume_range=base["prompt_volume_range"],  # type: ignore[arg-type]
        rounds_range=rounds_range,
        arrival_rate=arrival_rate,
        request_count=request_count,
        seed=seed,
    )


def _solve_tilt_exponent(lo: float, hi: float, mean: float) -> float:
    """Finds p > 0 so that E[lo * (hi/lo)^(U^p)] = mean for U ~ Uniform(0,1).

    p -> 0 pushes the mean toward hi, large p toward lo, p = 1 is plain
    log-uniform, so any mean strictly inside (lo, hi) has a unique root.
    """
    ratio = hi / lo

    def expected(p: float) -> float:
        val, _ = quad(lambda u: lo * ratio ** (u ** p), 0.0, 1.0, limit=200)
        return val

    return brentq(lambda p: expected(p) - mean, 1e-9, 80.0, xtol=1e-12, rtol=1e-12)


def _split_volume(total: int, num_rounds: int, round0_fraction: float) -> List[int]:
    """Splits a session's prefill volume: round 0 takes the configured
    fraction, the rest spreads as evenly as possible over later rounds."""
    if num_rounds == 1:
        return [total]
    r0 = max(1, int(round(total * round0_fraction)))
    r0 = min(r0, total - (num_rounds - 1))
    rest = total - r0
    later, extra = divmod(rest, num_rounds - 1)
    parts = [r0] + [later + (1 if i < extra else 0) for i in range(num_rounds - 1)]
    return parts


def _sample_tool_duration(dist: Dict[str, float], rng: np.random.Generator) -> float:
    if dist["family"] == "constant":
        return float(dist["value_s"])
    mu = math.log(dist["median_s"])
    return float(rng.lognormal(mean=mu, sigma=dist["sigma"]))


def generate_workload(config: RegimeConfig) -> List[SessionTrace]:
    """Draws request_count session traces; deterministic in config + seed."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    lo, hi = config.prompt_volume_range
    if lo == hi:
        tilt = None
    else:
        tilt = _solve_tilt_exponent(lo, hi, config.mean_prompt_volume)

    gaps = rng.exponential(scale=1.0 / config.arrival_rate, size=config.request_count)
    arrivals = np.cumsum(gaps)

    traces: List[SessionTrace] = []
    rmin, rmax = config.rounds_range
    dmin, dmax = config.decode_tokens_range
    for i in range(config.request_count):
        if tilt is None:
            volume = int(round(lo))
        else:
            u = rng.random()
            volume = int(round(lo * (hi / lo) ** (u ** tilt)))
            volume = min(max(volume, int(math.ceil(lo))), int(math.floor(hi)))
        num_rounds = int(rng.integers(rmin, rmax + 1))
        volume = max(volume, num_rounds)
        prefills = _split_volume(volume, num_rounds, config.round0_volume_fraction)
        rounds = []
        for r in range(num_rounds):
            decode = int(rng.integers(dmin, dmax + 1))
            if r < num_rounds - 1:
                if config.tool_duration_distribution is None:
                    tool: Optional[float] = 0.0
                else:
                    tool = _sample_tool_duration(config.tool_duration_distribution, rng)
            else:
                tool = None
            rounds.append(RoundSpec(prefills[r], decode, tool))
        traces.append(
            SessionTrace(
                session_id=f"s{i:05d}",
                arrival_time_s=float(arrivals[i]),
                rounds=tuple(rounds),
            )
        )
    return traces


@dataclass(frozen=True)
class Violation:
    session_id: str
    field: str
    message: str


@dataclass
class ValidationReport:
    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, session_id: str, field_name: str, message: str) -> None:
        self.violations.append(Violation(session_id, field_name, message))


def validate_trace(
    traces: Sequence[SessionTrace], context_limit: int = K_CONTEXT_LIMIT_TOKENS
) -> ValidationReport:
    """Checks every trace invariant; violations are data, not exceptions."""
    report = ValidationReport()
    for t in traces:
        if not t.rounds:
            report.add(t.session_id, "rounds", "rounds must be non-empty")
            continue
        if t.arrival_time_s < 0:
            report.add(t.session_id, "arrival_time_s", f"arrival_time_s {t.arrival_time_s} < 0")
        for idx, r in enumerate(t.rounds):
            if r.new_prefill_tokens < 1:
                report.add(t.session_id, "new_prefill_tokens", f"round {idx}: new_prefill_tokens {r.new_prefill_tokens} < 1")
            if r.decode_tokens < 1:
                report.add(t.session_id, "decode_tokens", f"round {idx}: decode_tokens {r.decode_tokens} < 1")
            if r.tool_duration_s is not None and r.tool_duration_s < 0:
                report.add(t.session_id, "tool_duration_s", f"round {idx}: tool_duration_s {r.tool_duration_s} < 0")
        if t.rounds[-1].tool_duration_s is not None:
            report.add(t.session_id, "tool_duration_s", "final round must not carry tool_duration_s")
        total = t.total_context_tokens
        if total > context_limit:
            report.add(t.session_id, "context", f"cumulative context {total} exceeds limit {context_limit}")
    return report


def save_trace(traces: Sequence[SessionTrace], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            record = {
                "session_id": t.session_id,
                "arrival_time_s": t.arrival_time_s,
                "rounds": [
                    {
                        "new_prefill_tokens": r.new_prefill_tokens,
                        "decode_tokens": r.decode_tokens,
                        "tool_duration_s": r.tool_duration_s,
                    }
                    for r in t.rounds
                ],
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def load_trace(path: str) -> List[SessionTrace]:
    """Parses and validates a JSONL trace file; raises on the first bad record."""
    traces: List[SessionTrace] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"line {lineno}: not valid JSON ({exc})") from exc
            try:
                rounds = tuple(
                    RoundSpec(
                        new_prefill_tokens=int(r["new_prefill_tokens"]),
                        decode_tokens=int(r["decode_tokens"]),
                        tool_duration_s=None if r["tool_duration_s"] is None else float(r["tool_duration_s"]),
                    )
                    for r in record["rounds"]
                )
                trace = SessionTrace(
                    session_id=str(record["session_id"]),
                    arrival_time_s=float(record["arrival_time_s"]),
                    rounds=rounds,
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise TraceFormatError(f"line {lineno}: malformed trace record ({exc})") from exc
            report = validate_trace([trace])
            structural = [v for v in report.violations if v.field != "context"]
            if structural:
                v = structural[0]
                raise TraceFormatError(
                    f"line {lineno}: session {v.session_id}: {v.field}: {v.message}"
                )
            traces.append(trace)
    return traces
