"""Command-line experiment driver.

Subcommands:
  generate  draw a workload trace from the config's regime and save it
  run       simulate the configured policy over the trace, audit the log,
            and emit events + completion records + metrics
  compare   cross-run ratio table (every policy against the best baseline)
  report    per-run plot-data CSVs (goodput series, per-round TTFT,
            eviction series)

The default output root comes from AGENTSCHED_OUTPUT_ROOT (falling back to
./runs); --out overrides it per invocation. Exit status: 0 on success, 1
when any log audit fails, 2 on configuration or compatibility errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .audits import run_standard_audits
from .baselines import K_STATIC_TTL_S, make_policy
from .config import (
    AblationFlags,
    ConfigError,
    ExperimentConfig,
    config_hash,
    load_experiment_config,
    substrate_hash,
)
from .metrics import (
    CompletionRecord,
    GoodputConfig,
    build_completion_records,
    compute_goodput,
    compute_ideal_times,
    eviction_series,
    latency_summary,
    ttft_per_round,
    write_summary_csv,
)
from .sim import run_simulation
from .workload import generate_workload, load_trace, save_trace, validate_trace

ENV_OUTPUT_ROOT = "AGENTSCHED_OUTPUT_ROOT"
ABLATION_CHOICES = ("coordinator", "coscheduler", "control-plane")


def _output_root(override: Optional[str]) -> Path:
    if override:
        return Path(override)
    return Path(os.environ.get(ENV_OUTPUT_ROOT, "runs"))


def _apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "policy", None) is not None:
        cfg.policy_kind = args.policy
        cfg.validate()
    ablate = getattr(args, "ablate", None) or []
    if ablate:
        cfg.ablation = AblationFlags(
            coordinator="coordinator" not in ablate,
            coscheduler="coscheduler" not in ablate,
            control_plane="control-plane" not in ablate,
        )
    return cfg


def _resolve_traces(cfg: ExperimentConfig, seed: int):
    if cfg.trace_path is not None:
        traces = load_trace(cfg.trace_path)
    else:
        regime = dataclasses.replace(cfg.regime, seed=seed)
        traces = generate_workload(regime)
    report = validate_trace(traces, cfg.engine.context_limit_tokens)
    if not report.ok:
        first = report.violations[0]
        raise ConfigError(
            f"trace invalid ({len(report.violations)} violations); first: "
            f"session {first.session_id}: {first.field}: {first.message}"
        )
    return traces


def _dump_events(events: Sequence[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in events:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def _dump_records(records: Sequence[CompletionRecord], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["session_id", "arrival_time", "completion_time", "latency", "ideal_time", "tau", "ttft_per_round"]
        )
        for r in records:
            writer.writerow(
                [
                    r.session_id,
                    repr(r.arrival_time),
                    repr(r.completion_time),
                    repr(r.latency),
                    repr(r.ideal_time),
                    repr(r.tau),
                    "|".join(repr(v) for v in r.ttft_per_round),
                ]
            )


def _load_records(path: Path) -> List[CompletionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ttfts = tuple(float(v) for v in row["ttft_per_round"].split("|") if v)
            records.append(
                CompletionRecord(
                    session_id=row["session_id"],
                    arrival_time=float(row["arrival_time"]),
                    completion_time=float(row["completion_time"]),
                    latency=float(row["latency"]),
                    ideal_time=float(row["ideal_time"]),
                    tau=float(row["tau"]),
                    ttft_per_round=ttfts,
                )
            )
    return records


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_experiment_config(args.config), args)
    if cfg.regime is None:
        raise ConfigError("generate needs a 'regime' section in the config")
    seed = cfg.seeds[0]
    out_dir = _output_root(args.out) / f"{Path(args.config).stem}-trace"
    out_dir.mkdir(parents=True, exist_ok=True)
    traces = _resolve_traces(cfg, seed)
    trace_path = out_dir / "trace.jsonl"
    save_trace(traces, str(trace_path))
    meta = {
        "config_hash": config_hash(cfg),
        "seed": seed,
        "sessions": len(traces),
        "total_prefill_tokens": sum(t.total_prefill_tokens for t in traces),
        "mean_prefill_tokens": sum(t.total_prefill_tokens for t in traces) / len(traces),
    }
    (out_dir / "trace.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {trace_path} ({len(traces)} sessions)")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _apply_overrides(load_experiment_config(args.config), args)
    seed = cfg.seeds[0]
    tag = f"{Path(args.config).stem}-{cfg.policy_kind}"
    if not (cfg.ablation.coordinator and cfg.ablation.coscheduler and cfg.ablation.control_plane):
        off = [
            name
            for name, on in (
                ("coordinator", cfg.ablation.coordinator),
                ("coscheduler", cfg.ablation.coscheduler),
                ("control-plane", cfg.ablation.control_plane),
            )
            if not on
        ]
        tag += "-no-" + "-".join(off)
    out_dir = _output_root(args.out) / f"{tag}-s{seed}"
    out_dir.mkdir(parents=True, exist_ok=True)

    traces = _resolve_traces(cfg, seed)
    gpu = cfg.engine.gpu()
    ideals = compute_ideal_times(traces, gpu)
    policy = make_policy(
        cfg.policy_kind,
        cfg.mlfq,
        cfg.retention,
        cfg.pressure,
        cfg.policy_params,
        enable_coordinator=cfg.ablation.coordinator,
        enable_coscheduler=cfg.ablation.coscheduler,
    )
    result = run_simulation(
        traces,
        cfg.engine,
        policy,
        controller=cfg.controller,
        pressure=cfg.pressure,
        enable_control_plane=cfg.ablation.control_plane,
        config_hash=config_hash(cfg),
    )

    residency_ceiling = None
    if cfg.policy_kind == "static_ttl":
        residency_ceiling = float(cfg.policy_params.get("ttl_seconds", K_STATIC_TTL_S))
    audits = run_standard_audits(
        result.events,
        result.calls,
        total_blocks=cfg.engine.total_blocks,
        token_budget=cfg.engine.token_budget_per_tick,
        worker_slots=cfg.engine.tool_worker_slots,
        drained=True,
        pinned_residency_ceiling_s=residency_ceiling,
        tick_s=cfg.engine.tick_duration_s,
        expect_fcfs_order=cfg.policy_kind == "fcfs",
    )

    records = build_completion_records(result.events, ideals, cfg.goodput.slo_slack_alpha)
    goodput = compute_goodput(records, cfg.goodput, result.horizon_s)
    summary = latency_summary(records)

    _dump_events(result.events, out_dir / "events.jsonl")
    _dump_records(records, out_dir / "records.csv")
    rows = [
        {"policy": result.policy_name, "seed": seed, "metric": f"latency_{k}", "value": v}
        for k, v in sorted(summary.items())
    ]
    rows.append(
        {
            "policy": result.policy_name,
            "seed": seed,
            "metric": f"goodput_alpha{cfg.goodput.slo_slack_alpha:g}",
            "value": goodput.aggregate,
        }
    )
    for key, value in sorted(result.counters.items()):
        rows.append({"policy": result.policy_name, "seed": seed, "metric": key, "value": value})
    write_summary_csv(rows, str(out_dir / "metrics.csv"))

    meta = {
        "config_hash": result.config_hash,
        "substrate_hash": substrate_hash(cfg),
        "policy": result.policy_name,
        "policy_kind": cfg.policy_kind,
        "ablation": dataclasses.asdict(cfg.ablation),
        "seed": seed,
        "horizon_s": result.horizon_s,
        "goodput": {"slo_slack_alpha": cfg.goodput.slo_slack_alpha, "window_s": cfg.goodput.window_s},
        "counters": result.counters,
        "audit_violations": {k: v for k, v in audits.items() if v},
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    failed = False
    for name in sorted(audits):
        violations = audits[name]
        if violations:
            failed = True
            print(f"audit {name}: {len(violations)} violation(s); first: {violations[0]}")
        else:
            print(f"audit {name}: ok")
    print(
        f"{result.policy_name}: {result.counters['completed']}/{len(traces)} sessions, "
        f"horizon {result.horizon_s:.1f} s, mean latency "
        f"{summary.get('mean', float('nan')):.2f} s, goodput {goodput.aggregate:.4f} req/s "
        f"-> {out_dir}"
    )
    return 1 if failed else 0


def _read_meta(run_dir: Path) -> dict:
    meta_path = run_dir / "meta.json"
    if not meta_path.exists():
        raise ConfigError(f"{run_dir}: no meta.json (not a run directory?)")
    return json.loads(meta_path.read_text())


def _read_metrics(run_dir: Path) -> Dict[str, float]:
    out = {}
    with open(run_dir / "metrics.csv", "r", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["metric"]] = float(row["value"])
    return out


LOWER_IS_BETTER_PREFIXES = ("latency_mean", "latency_p")


def cmd_compare(args: argparse.Namespace) -> int:
    run_dirs = [Path(p) for p in args.runs]
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two run directories")
    metas = {d: _read_meta(d) for d in run_dirs}
    hashes = {m["substrate_hash"] for m in metas.values()}
    if len(hashes) != 1:
        detail = ", ".join(f"{d.name}={m['substrate_hash']}" for d, m in metas.items())
        raise ConfigError(f"runs are not comparable (different workload/engine): {detail}")

    metrics = {d: _read_metrics(d) for d in run_dirs}
    labels = {}
    for d, m in metas.items():
        label = m["policy"]
        off = [k for k, on in m.get("ablation", {}).items() if not on]
        if off:
            label += "-no-" + "-".join(sorted(off))
        labels[d] = label
    baseline_dirs = [d for d in run_dirs if metas[d]["policy_kind"] != "mars"]
    if not baseline_dirs:
        raise ConfigError("compare needs at least one baseline (non-mars) run")

    shared = set.intersection(*(set(v) for v in metrics.values()))
    compare_metrics = sorted(
        m for m in shared if m.startswith("latency_") or m.startswith("goodput_")
    )
    rows = []
    for metric in compare_metrics:
        if metric == "latency_count":
            continue
        lower_better = metric.startswith(LOWER_IS_BETTER_PREFIXES)
        baseline_vals = {d: metrics[d][metric] for d in baseline_dirs}
        best_dir = min(baseline_vals, key=lambda d: baseline_vals[d]) if lower_better else max(
            baseline_vals, key=lambda d: baseline_vals[d]
        )
        best = baseline_vals[best_dir]
        for d in run_dirs:
            value = metrics[d][metric]
            if lower_better:
                ratio = best / value if value > 0 else float("inf")
            else:
                ratio = value / best if best > 0 else float("inf")
            rows.append(
                {
                    "policy": labels[d],
                    "metric": metric,
                    "value": value,
                    "best_baseline": labels[best_dir],
                    "best_baseline_value": best,
                    "ratio_vs_best_baseline": ratio,
                }
            )
    out_path = Path(args.out) if args.out else _output_root(None) / "comparison.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=[
                "policy",
                "metric",
                "value",
                "best_baseline",
                "best_baseline_value",
                "ratio_vs_best_baseline",
            ],
        )
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    print(f"wrote {out_path} ({len(rows)} rows)")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    bins = args.bins
    for run in args.runs:
        run_dir = Path(run)
        meta = _read_meta(run_dir)
        events = []
        with open(run_dir / "events.jsonl", "r", encoding="utf-8") as fh:
            for line in fh:
                events.append(json.loads(line))
        records = _load_records(run_dir / "records.csv")
        out_dir = Path(args.out) if args.out else run_dir
        out_dir.mkdir(parents=True, exist_ok=True)

        gp_cfg = GoodputConfig(
            slo_slack_alpha=meta["goodput"]["slo_slack_alpha"],
            window_s=meta["goodput"]["window_s"],
        )
        series = compute_goodput(records, gp_cfg, meta["horizon_s"])
        with open(out_dir / "goodput_series.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["window_index", "window_start_s", "goodput_req_s"])
            for i, rate in enumerate(series.rates):
                writer.writerow([i, i * series.window_s, rate])

        ttft = ttft_per_round(events)
        with open(out_dir / "ttft_per_round.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "mean_s", "p50_s", "p90_s", "p99_s", "count"])
            for rnd, stats in ttft.items():
                writer.writerow(
                    [rnd, stats["mean"], stats["p50"], stats["p90"], stats["p99"], int(stats["count"])]
                )

        evs = eviction_series(events, bins)
        with open(out_dir / "eviction_series.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["progress_bin", "evicted_blocks"])
            for i, count in enumerate(evs):
                writer.writerow([i, count])
        print(f"report for {run_dir.name}: goodput aggregate {series.aggregate:.4f} req/s -> {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agentsched",
        description="Deterministic co-scheduling simulator for agentic LLM serving workloads.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="output root (default: $AGENTSCHED_OUTPUT_ROOT or ./runs)")
        p.add_argument("--seed", type=int, default=None, help="override the config's first seed")
        p.add_argument("--policy", default=None, help="override the configured policy kind")
        p.add_argument(
            "--ablate",
            action="append",
            choices=ABLATION_CHOICES,
            default=None,
            help="disable one subsystem (repeatable)",
        )

    p_gen = sub.add_parser("generate", help="generate a workload trace from the config's regime")
    add_common(p_gen)
    p_gen.set_defaults(func=cmd_generate)

    p_run = sub.add_parser("run", help="run one policy over the workload and audit the log")
    add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="ratio table across finished runs")
    p_cmp.add_argument("--runs", nargs="+", required=True, help="run output directories")
    p_cmp.add_argument("--out", default=None, help="comparison CSV path")
    p_cmp.set_defaults(func=cmd_compare)

    p_rep = sub.add_parser("report", help="plot-data CSVs for finished runs")
    p_rep.add_argument("--runs", nargs="+", required=True, help="run output directories")
    p_rep.add_argument("--out", default=None, help="output directory (default: inside each run)")
    p_rep.add_argument("--bins", type=int, default=10, help="eviction-series progress bins")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
